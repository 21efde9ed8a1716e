//! Domain model for five-device, thirteen-port converter topologies.
//!
//! Port numbering is fixed: `0` is ground, `1` is `IN`, `2` is `OUT`, and
//! device slot `k` (0..5) owns ports `3 + 2k` (its port 1) and `4 + 2k`
//! (its port 2). A net is identified by its minimum member port.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Number of devices in every topology.
pub const NUM_DEVICES: usize = 5;
/// External ports plus two ports per device.
pub const NUM_PORTS: usize = 3 + 2 * NUM_DEVICES;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CircuitError {
    #[error("malformed topology: {0}")]
    MalformedTopology(String),
    #[error("invalid component pool: {0}")]
    InvalidPool(String),
}

/// Two-terminal device kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DeviceKind {
    Capacitor,
    Inductor,
    /// Conducts during the first `duty` fraction of each period.
    PhaseISwitch,
    /// Conducts during the remainder of each period.
    PhaseIISwitch,
}

impl DeviceKind {
    pub const ALL: [DeviceKind; 4] = [
        DeviceKind::Capacitor,
        DeviceKind::Inductor,
        DeviceKind::PhaseISwitch,
        DeviceKind::PhaseIISwitch,
    ];

    /// Instance-name prefix (`C`, `L`, `Sa`, `Sb`).
    pub fn prefix(self) -> &'static str {
        match self {
            DeviceKind::Capacitor => "C",
            DeviceKind::Inductor => "L",
            DeviceKind::PhaseISwitch => "Sa",
            DeviceKind::PhaseIISwitch => "Sb",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DeviceKind::Capacitor => 0,
            DeviceKind::Inductor => 1,
            DeviceKind::PhaseISwitch => 2,
            DeviceKind::PhaseIISwitch => 3,
        }
    }
}

impl fmt::Display for DeviceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

impl FromStr for DeviceKind {
    type Err = CircuitError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "C" => Ok(DeviceKind::Capacitor),
            "L" => Ok(DeviceKind::Inductor),
            "Sa" => Ok(DeviceKind::PhaseISwitch),
            "Sb" => Ok(DeviceKind::PhaseIISwitch),
            other => Err(CircuitError::InvalidPool(format!(
                "unknown device kind `{other}`"
            ))),
        }
    }
}

/// Ordered list of the five devices a topology uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ComponentPool([DeviceKind; NUM_DEVICES]);

impl ComponentPool {
    pub fn new(kinds: [DeviceKind; NUM_DEVICES]) -> Self {
        Self(kinds)
    }

    pub fn from_slice(kinds: &[DeviceKind]) -> Result<Self, CircuitError> {
        let arr: [DeviceKind; NUM_DEVICES] = kinds.try_into().map_err(|_| {
            CircuitError::InvalidPool(format!(
                "expected {NUM_DEVICES} devices, got {}",
                kinds.len()
            ))
        })?;
        Ok(Self(arr))
    }

    pub fn kinds(&self) -> &[DeviceKind; NUM_DEVICES] {
        &self.0
    }

    pub fn kind(&self, slot: usize) -> DeviceKind {
        self.0[slot]
    }

    /// Per-kind index of the device in `slot` (the `1` in `C1`).
    pub fn instance_index(&self, slot: usize) -> usize {
        let kind = self.0[slot];
        self.0[..slot].iter().filter(|&&k| k == kind).count()
    }

    /// Instance name of the device in `slot`, e.g. `Sa0`.
    pub fn instance_name(&self, slot: usize) -> String {
        format!("{}{}", self.0[slot].prefix(), self.instance_index(slot))
    }

    pub fn instance_names(&self) -> Vec<String> {
        (0..NUM_DEVICES).map(|s| self.instance_name(s)).collect()
    }

    /// Slot holding the `index`-th device of `kind`, if present.
    pub fn slot_of(&self, kind: DeviceKind, index: usize) -> Option<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &k)| k == kind)
            .nth(index)
            .map(|(slot, _)| slot)
    }
}

impl fmt::Display for ComponentPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, k) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{k}")?;
        }
        Ok(())
    }
}

impl FromStr for ComponentPool {
    type Err = CircuitError;

    /// Parses a comma-separated kind list such as `C,C,L,Sa,Sb`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let kinds = s
            .split(',')
            .map(|part| part.trim().parse())
            .collect::<Result<Vec<DeviceKind>, _>>()?;
        Self::from_slice(&kinds)
    }
}

/// External terminals of the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum External {
    Ground,
    In,
    Out,
}

impl External {
    pub const ALL: [External; 3] = [External::Ground, External::In, External::Out];

    pub fn name(self) -> &'static str {
        match self {
            External::Ground => "0",
            External::In => "IN",
            External::Out => "OUT",
        }
    }

    pub fn port(self) -> PortId {
        match self {
            External::Ground => PortId::GROUND,
            External::In => PortId::IN,
            External::Out => PortId::OUT,
        }
    }
}

/// What a port id refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PortRef {
    External(External),
    /// Device `slot`, terminal 1 or 2.
    Device {
        slot: usize,
        terminal: u8,
    },
}

/// Port index in `0..13`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PortId(u8);

impl PortId {
    pub const GROUND: PortId = PortId(0);
    pub const IN: PortId = PortId(1);
    pub const OUT: PortId = PortId(2);

    pub fn new(id: usize) -> Option<Self> {
        (id < NUM_PORTS).then_some(PortId(id as u8))
    }

    /// Port of device `slot`, `terminal` in {1, 2}.
    pub fn device(slot: usize, terminal: u8) -> Self {
        debug_assert!(slot < NUM_DEVICES && (terminal == 1 || terminal == 2));
        PortId((3 + 2 * slot + (terminal as usize - 1)) as u8)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn describe(self) -> PortRef {
        match self.0 {
            0 => PortRef::External(External::Ground),
            1 => PortRef::External(External::In),
            2 => PortRef::External(External::Out),
            p => {
                let d = p as usize - 3;
                PortRef::Device {
                    slot: d / 2,
                    terminal: (d % 2) as u8 + 1,
                }
            }
        }
    }

    pub fn all() -> impl Iterator<Item = PortId> {
        (0..NUM_PORTS as u8).map(PortId)
    }
}

impl fmt::Display for PortId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Assignment of every port to a net, normalized so each net is named by its
/// minimum member port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Topology {
    pool: ComponentPool,
    net_of: [u8; NUM_PORTS],
}

impl Topology {
    /// Builds a topology from an explicit port-to-net map. Every net id must be
    /// a port that maps to itself.
    pub fn new(
        pool: ComponentPool,
        assignment: &BTreeMap<PortId, PortId>,
    ) -> Result<Self, CircuitError> {
        if assignment.len() != NUM_PORTS {
            return Err(CircuitError::MalformedTopology(format!(
                "assignment covers {} ports, expected {NUM_PORTS}",
                assignment.len()
            )));
        }
        let mut labels = [0usize; NUM_PORTS];
        for (&port, &net) in assignment {
            match assignment.get(&net) {
                Some(&rep) if rep == net => {}
                _ => {
                    return Err(CircuitError::MalformedTopology(format!(
                        "net {net} of port {port} is not its own representative"
                    )))
                }
            }
            labels[port.index()] = net.index();
        }
        Ok(Self::from_labels(pool, &labels))
    }

    /// Builds a topology from arbitrary net labels: ports with equal labels
    /// share a net.
    pub fn from_labels<L: PartialEq + Copy>(pool: ComponentPool, labels: &[L; NUM_PORTS]) -> Self {
        let mut net_of = [0u8; NUM_PORTS];
        for p in 0..NUM_PORTS {
            let first = (0..=p).find(|&q| labels[q] == labels[p]).unwrap_or(p);
            net_of[p] = first as u8;
        }
        Self { pool, net_of }
    }

    /// Builds a topology from groups of connected ports; ports not mentioned
    /// become singleton nets.
    pub fn from_groups(pool: ComponentPool, groups: &[&[PortId]]) -> Self {
        let mut labels: [usize; NUM_PORTS] = std::array::from_fn(|p| p);
        for group in groups {
            if let Some(first) = group.first() {
                for port in group.iter() {
                    labels[port.index()] = NUM_PORTS + first.index();
                }
            }
        }
        Self::from_labels(pool, &labels)
    }

    pub fn pool(&self) -> &ComponentPool {
        &self.pool
    }

    pub fn net_of(&self, port: PortId) -> PortId {
        PortId(self.net_of[port.index()])
    }

    /// Raw representative array indexed by port.
    pub fn net_array(&self) -> &[u8; NUM_PORTS] {
        &self.net_of
    }

    pub fn assignment(&self) -> BTreeMap<PortId, PortId> {
        PortId::all().map(|p| (p, self.net_of(p))).collect()
    }

    /// Distinct nets (representatives) in increasing order.
    pub fn nets(&self) -> Vec<PortId> {
        PortId::all().filter(|&p| self.net_of(p) == p).collect()
    }

    pub fn members(&self, net: PortId) -> Vec<PortId> {
        PortId::all().filter(|&p| self.net_of(p) == net).collect()
    }

    /// Nets of device `slot`'s terminal 1 and terminal 2.
    pub fn device_nets(&self, slot: usize) -> (PortId, PortId) {
        (
            self.net_of(PortId::device(slot, 1)),
            self.net_of(PortId::device(slot, 2)),
        )
    }

    /// Applies a symmetry action and renormalizes.
    pub fn act(&self, action: &SymmetryAction) -> Topology {
        let mut labels = [0u8; NUM_PORTS];
        labels[..3].copy_from_slice(&self.net_of[..3]);
        for slot in 0..NUM_DEVICES {
            let target = action.perm[slot];
            let (t1, t2) = if action.swap[slot] { (2, 1) } else { (1, 2) };
            labels[PortId::device(target, t1).index()] =
                self.net_of[PortId::device(slot, 1).index()];
            labels[PortId::device(target, t2).index()] =
                self.net_of[PortId::device(slot, 2).index()];
        }
        Topology::from_labels(self.pool, &labels)
    }

    /// Canonical key: lexicographic minimum of the representative array over
    /// all kind-preserving device permutations and terminal swaps, prefixed by
    /// the pool's kind codes.
    pub fn canonicalize(&self) -> CanonicalKey {
        let mut best: Option<[u8; NUM_PORTS]> = None;
        for perm in kind_preserving_permutations(&self.pool) {
            for mask in 0u32..(1 << NUM_DEVICES) {
                let action = SymmetryAction {
                    perm,
                    swap: std::array::from_fn(|i| mask & (1 << i) != 0),
                };
                let candidate = self.act(&action).net_of;
                if best.is_none_or(|b| candidate < b) {
                    best = Some(candidate);
                }
            }
        }
        let mut bytes = Vec::with_capacity(NUM_DEVICES + NUM_PORTS);
        bytes.extend(self.pool.kinds().iter().map(|k| k.code()));
        bytes.extend_from_slice(&best.expect("symmetry group is never empty"));
        CanonicalKey(bytes)
    }

    /// Whether IN and OUT share a connected component of the net graph whose
    /// edges are the devices.
    pub fn structural_screen(&self) -> ScreenResult {
        let mut parent: [usize; NUM_PORTS] = std::array::from_fn(|p| p);
        fn find(parent: &mut [usize; NUM_PORTS], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for slot in 0..NUM_DEVICES {
            let (a, b) = self.device_nets(slot);
            let (ra, rb) = (find(&mut parent, a.index()), find(&mut parent, b.index()));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
        let i = find(&mut parent, self.net_of(PortId::IN).index());
        let o = find(&mut parent, self.net_of(PortId::OUT).index());
        ScreenResult { connected: i == o }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] ", self.pool)?;
        for (i, n) in self.net_of.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{n}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScreenResult {
    pub connected: bool,
}

/// Key identifying a topology up to identical-device permutation, terminal
/// swap and net renaming.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CanonicalKey(Vec<u8>);

impl CanonicalKey {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

/// Element of the symmetry group: device in slot `i` moves to slot
/// `perm[i]` (same kind) and has its terminals swapped when `swap[i]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SymmetryAction {
    pub perm: [usize; NUM_DEVICES],
    pub swap: [bool; NUM_DEVICES],
}

impl SymmetryAction {
    pub fn identity() -> Self {
        Self {
            perm: std::array::from_fn(|i| i),
            swap: [false; NUM_DEVICES],
        }
    }

    /// Draws a uniformly random group element for `pool`.
    pub fn random<R: rand::Rng + ?Sized>(pool: &ComponentPool, rng: &mut R) -> Self {
        use rand::seq::SliceRandom;
        let mut perm: [usize; NUM_DEVICES] = std::array::from_fn(|i| i);
        for kind in DeviceKind::ALL {
            let slots: Vec<usize> = (0..NUM_DEVICES).filter(|&s| pool.kind(s) == kind).collect();
            let mut shuffled = slots.clone();
            shuffled.shuffle(rng);
            for (from, to) in slots.iter().zip(shuffled) {
                perm[*from] = to;
            }
        }
        Self {
            perm,
            swap: std::array::from_fn(|_| rng.gen_bool(0.5)),
        }
    }
}

/// All permutations of slots that map each slot to a slot of the same kind.
pub fn kind_preserving_permutations(pool: &ComponentPool) -> Vec<[usize; NUM_DEVICES]> {
    let mut out = Vec::new();
    let mut current: [usize; NUM_DEVICES] = [usize::MAX; NUM_DEVICES];
    let mut used = [false; NUM_DEVICES];
    fn rec(
        pool: &ComponentPool,
        slot: usize,
        current: &mut [usize; NUM_DEVICES],
        used: &mut [bool; NUM_DEVICES],
        out: &mut Vec<[usize; NUM_DEVICES]>,
    ) {
        if slot == NUM_DEVICES {
            out.push(*current);
            return;
        }
        for target in 0..NUM_DEVICES {
            if !used[target] && pool.kind(target) == pool.kind(slot) {
                used[target] = true;
                current[slot] = target;
                rec(pool, slot + 1, current, used, out);
                used[target] = false;
            }
        }
    }
    rec(pool, 0, &mut current, &mut used, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use DeviceKind::*;

    fn pool() -> ComponentPool {
        ComponentPool::new([Capacitor, Capacitor, Inductor, PhaseISwitch, PhaseIISwitch])
    }

    #[test]
    fn instance_names_follow_pool_order() {
        let p = ComponentPool::new([
            PhaseISwitch,
            PhaseIISwitch,
            PhaseIISwitch,
            Capacitor,
            Inductor,
        ]);
        assert_eq!(p.instance_names(), ["Sa0", "Sb0", "Sb1", "C0", "L0"]);
        assert_eq!(p.slot_of(PhaseIISwitch, 1), Some(2));
        assert_eq!(p.slot_of(Capacitor, 1), None);
        assert_eq!("Sa,Sb,Sb,C,L".parse::<ComponentPool>().unwrap(), p);
        assert_eq!(p.to_string(), "Sa,Sb,Sb,C,L");
        assert!("C,C,L".parse::<ComponentPool>().is_err());
    }

    #[test]
    fn port_ids_biject_with_descriptions() {
        for port in PortId::all() {
            let back = match port.describe() {
                PortRef::External(e) => e.port(),
                PortRef::Device { slot, terminal } => PortId::device(slot, terminal),
            };
            assert_eq!(back, port);
        }
        assert_eq!(PortId::device(4, 2).index(), 12);
    }

    #[test]
    fn single_net_topology() {
        let t = Topology::from_labels(pool(), &[7u8; NUM_PORTS]);
        assert!(PortId::all().all(|p| t.net_of(p) == PortId::GROUND));
        assert!(t.structural_screen().connected);
    }

    #[test]
    fn missing_port_is_rejected() {
        let mut a: BTreeMap<PortId, PortId> = PortId::all().map(|p| (p, p)).collect();
        a.remove(&PortId::new(12).unwrap());
        assert!(matches!(
            Topology::new(pool(), &a),
            Err(CircuitError::MalformedTopology(_))
        ));
    }

    #[test]
    fn non_representative_net_is_rejected() {
        let mut a: BTreeMap<PortId, PortId> = PortId::all().map(|p| (p, p)).collect();
        let p5 = PortId::new(5).unwrap();
        let p6 = PortId::new(6).unwrap();
        a.insert(p5, p6);
        a.insert(p6, p5);
        assert!(Topology::new(pool(), &a).is_err());
    }

    #[test]
    fn constructor_normalizes_to_minimum_member() {
        // IN–Sa0.1, Sa0.2–L0.1, L0.2–OUT
        let sa = 3;
        let l = 2;
        let mut a: BTreeMap<PortId, PortId> = PortId::all().map(|p| (p, p)).collect();
        let sa1 = PortId::device(sa, 1);
        let sa2 = PortId::device(sa, 2);
        let l1 = PortId::device(l, 1);
        let l2 = PortId::device(l, 2);
        a.insert(PortId::IN, sa1);
        a.insert(sa2, l1);
        a.insert(l1, l1);
        a.insert(l2, PortId::OUT);
        let t = Topology::new(pool(), &a).unwrap();
        assert_eq!(t.net_of(sa1), PortId::IN);
        assert_eq!(t.net_of(sa2), l1);
        assert_eq!(t.net_of(l2), PortId::OUT);
        assert!(t.structural_screen().connected);
        assert_eq!(Topology::new(pool(), &t.assignment()).unwrap(), t);
    }

    #[test]
    fn screen_detects_dangling_out() {
        let t = Topology::from_groups(pool(), &[&[PortId::IN, PortId::device(0, 1)]]);
        assert!(!t.structural_screen().connected);
    }

    #[test]
    fn canonical_key_symmetries() {
        let base = Topology::from_groups(
            pool(),
            &[
                &[PortId::IN, PortId::device(0, 1), PortId::device(3, 1)],
                &[PortId::device(3, 2), PortId::device(2, 1)],
                &[PortId::device(2, 2), PortId::OUT, PortId::device(1, 1)],
                &[
                    PortId::GROUND,
                    PortId::device(0, 2),
                    PortId::device(1, 2),
                    PortId::device(4, 1),
                ],
            ],
        );
        let swapped_caps = base.act(&SymmetryAction {
            perm: [1, 0, 2, 3, 4],
            swap: [false; 5],
        });
        assert_ne!(swapped_caps, base);
        assert_eq!(swapped_caps.canonicalize(), base.canonicalize());
        let flipped = base.act(&SymmetryAction {
            perm: [0, 1, 2, 3, 4],
            swap: [true, false, false, false, false],
        });
        assert_eq!(flipped.canonicalize(), base.canonicalize());

        let moved_out = Topology::from_groups(
            pool(),
            &[
                &[PortId::IN, PortId::device(0, 1), PortId::device(3, 1)],
                &[PortId::device(3, 2), PortId::device(2, 1), PortId::OUT],
                &[PortId::device(2, 2), PortId::device(1, 1)],
                &[
                    PortId::GROUND,
                    PortId::device(0, 2),
                    PortId::device(1, 2),
                    PortId::device(4, 1),
                ],
            ],
        );
        assert_ne!(moved_out.canonicalize(), base.canonicalize());
    }

    #[test]
    fn group_size_matches_kind_multiplicities() {
        assert_eq!(kind_preserving_permutations(&pool()).len(), 2);
        let all_caps = ComponentPool::new([Capacitor; 5]);
        assert_eq!(kind_preserving_permutations(&all_caps).len(), 120);
    }
}
