fn main() { std::process::exit(mbbsim::cli::main_entry()) }
