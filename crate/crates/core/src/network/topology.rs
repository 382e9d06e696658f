use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{BranchKind, BusId, NetworkModel};

/// Open/closed position of every switch branch.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SwitchState(BTreeMap<String, bool>);

impl SwitchState {
    pub fn set(&mut self, id: &str, closed: bool) {
        self.0.insert(id.to_string(), closed);
    }

    pub fn is_closed(&self, id: &str) -> Option<bool> {
        self.0.get(id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, bool)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn all(model: &NetworkModel, closed: bool) -> Self {
        SwitchState(model.switch_ids().map(|id| (id.to_string(), closed)).collect())
    }
}

/// Maximal set of buses galvanically joined by closed branches.
#[derive(Debug, Clone, PartialEq)]
pub struct Island {
    pub member_buses: BTreeSet<BusId>,
    /// Bus indices into `NetworkModel::buses`, ascending.
    pub bus_indices: Vec<usize>,
    /// In-service grid-forming devices inside the island.
    pub grid_forming: Vec<String>,
}

impl Island {
    /// The island's grid-forming device when there is exactly one.
    pub fn grid_forming_device(&self) -> Option<&str> {
        match self.grid_forming.as_slice() {
            [one] => Some(one.as_str()),
            _ => None,
        }
    }

    pub fn contains(&self, bus: &str) -> bool {
        self.member_buses.contains(bus)
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Partitions the energized buses into islands.
///
/// A connected component is energized when it holds an in-service
/// grid-forming device or an in-service load. The back-to-back converter
/// is not a galvanic branch and never joins its two terminal buses.
pub fn find_islands(model: &NetworkModel, switches: &SwitchState) -> Vec<Island> {
    let n = model.buses.len();
    let mut dsu = DisjointSet::new(n);
    for br in &model.branches {
        let closed = match br.kind {
            BranchKind::Switch { normally_closed } => switches.is_closed(&br.id).unwrap_or(normally_closed),
            _ => true,
        };
        if closed {
            let f = model.bus_idx(&br.from_bus).expect("validated");
            let t = model.bus_idx(&br.to_bus).expect("validated");
            dsu.union(f, t);
        }
    }

    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        components.entry(dsu.find(i)).or_default().push(i);
    }

    let mut gfm: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    let mut loaded = BTreeSet::new();
    for d in model.devices.iter().filter(|d| d.in_service && d.kind.is_grid_forming()) {
        let root = dsu.find(model.bus_idx(&d.bus).expect("validated"));
        gfm.entry(root).or_default().push(d.id.clone());
    }
    for l in model.loads.iter().filter(|l| l.status) {
        loaded.insert(dsu.find(model.bus_idx(&l.bus).expect("validated")));
    }

    let energized: BTreeSet<usize> = gfm.keys().copied().chain(loaded).collect();
    components
        .into_iter()
        .filter(|(root, _)| energized.contains(root))
        .map(|(root, bus_indices)| Island {
            member_buses: bus_indices.iter().map(|&i| model.buses[i].id.clone()).collect(),
            bus_indices,
            grid_forming: gfm.remove(&root).unwrap_or_default(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkModel;

    #[test]
    fn all_closed_is_one_island() {
        let m = NetworkModel::builtin();
        let islands = find_islands(&m, &SwitchState::all(&m, true));
        assert_eq!(islands.len(), 1);
        assert_eq!(islands[0].member_buses.len(), m.buses.len());
        assert_eq!(islands[0].grid_forming.len(), 3);
        assert_eq!(islands[0].grid_forming_device(), None);
    }

    #[test]
    fn open_pcc_switches_split_three_ways() {
        let m = NetworkModel::builtin();
        let mut sw = SwitchState::all(&m, true);
        sw.set("pcc-650", false);
        sw.set("pcc-6501", false);
        let islands = find_islands(&m, &sw);
        assert_eq!(islands.len(), 3);
        let owner = |bus: &str| islands.iter().position(|i| i.contains(bus)).unwrap();
        assert_ne!(owner("650"), owner("6501"));
        assert_ne!(owner("650"), owner("grid"));
        assert_eq!(islands[owner("680")].grid_forming_device(), Some("bess_680"));
        assert_eq!(islands[owner("6801")].grid_forming_device(), Some("bess_6801"));
        assert_eq!(islands[owner("pcc")].grid_forming_device(), Some("grid_source"));
    }
}
