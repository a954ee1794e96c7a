//! Per-node, per-destination TORA/PDTORA state machine.
//!
//! Route creation uses the QRY/UPD exchange: a source floods a query, the
//! destination (or any node that already has a height) answers with an
//! update, and nodes that forwarded the query adopt a height one step above
//! the update's sender. In the power/delay-aware variant every forwarding
//! node gates the query on its residual battery fraction and charges its
//! node traverse time against the query's delay budget.
//!
//! Route maintenance reacts to the loss of a node's last downstream link. A
//! physical link failure generates a fresh reference level; a loss caused by
//! a neighbor's height increase propagates the highest neighbor level,
//! reflects it when all neighbors agree on an unreflected level, and infers
//! a partition when a node's own reflected level comes back from every
//! neighbor. Partition detection triggers a CLR flood that erases all state
//! for the destination inside the cut component.
//!
//! Handlers mutate only their own `NodeState` and describe every externally
//! visible effect as a [`ProtocolAction`]; the simulation kernel owns packet
//! queues, link state, and energy accounting.

use std::collections::{BTreeMap, BTreeSet};

use crate::energy::EnergyState;
use crate::heights::{new_reference_level, Height, HeightTuple, RefLevel};
use crate::qos::{admit_query, AdmissionResult, NttEstimator, QosConstraint};
use crate::types::{NodeId, SimTime};

/// Control and data packets. Sizes for control packets are configured
/// globally; data packets carry their own size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Packet {
    Qry {
        src: NodeId,
        dst: NodeId,
        min_power_fraction: f64,
        delay_budget_us: u64,
    },
    Upd {
        dst: NodeId,
        sender_height: HeightTuple,
        accumulated_delay_us: u64,
    },
    Clr {
        dst: NodeId,
        ref_level: RefLevel,
    },
    Data(DataPacket),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataPacket {
    pub src: NodeId,
    pub dst: NodeId,
    pub seq: u64,
    pub size_bits: u64,
    pub created_at: SimTime,
    /// Present on PDTORA flows; data packets of plain TORA carry none.
    pub qos: Option<QosConstraint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum PacketKind {
    Qry,
    Upd,
    Clr,
    Data,
}

impl Packet {
    pub fn kind(&self) -> PacketKind {
        match self {
            Packet::Qry { .. } => PacketKind::Qry,
            Packet::Upd { .. } => PacketKind::Upd,
            Packet::Clr { .. } => PacketKind::Clr,
            Packet::Data(_) => PacketKind::Data,
        }
    }

    pub fn size_bits(&self, control_packet_bits: u64) -> u64 {
        match self {
            Packet::Data(d) => d.size_bits,
            _ => control_packet_bits,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DropReason {
    NoRoute,
    PowerReject { residual: f64, threshold: f64 },
    DelayReject,
    Duplicate,
    Stale,
    DeadNode,
}

impl DropReason {
    pub fn label(&self) -> &'static str {
        match self {
            DropReason::NoRoute => "NoRoute",
            DropReason::PowerReject { .. } => "PowerReject",
            DropReason::DelayReject => "DelayReject",
            DropReason::Duplicate => "Duplicate",
            DropReason::Stale => "Stale",
            DropReason::DeadNode => "DeadNode",
        }
    }
}

/// Why a node's height changed; recorded in the trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeightCause {
    /// Took the sender's reference level plus one during route creation.
    Adopt,
    /// Fresh reference level after a physical link failure.
    Reverse,
    /// Joined the highest neighbor reference level below its members.
    Propagate,
    /// All neighbors shared one unreflected level; bounced it back.
    Reflect,
    /// All neighbors shared someone else's reflected level; started over.
    Regenerate,
    /// Height erased by a CLR or by partition detection.
    Clear,
    /// No neighbors left.
    Isolated,
}

impl HeightCause {
    pub fn label(&self) -> &'static str {
        match self {
            HeightCause::Adopt => "adopt",
            HeightCause::Reverse => "reverse",
            HeightCause::Propagate => "propagate",
            HeightCause::Reflect => "reflect",
            HeightCause::Regenerate => "regenerate",
            HeightCause::Clear => "clear",
            HeightCause::Isolated => "isolated",
        }
    }
}

/// Effects a handler asks the kernel to perform. Handlers never touch the
/// simulator directly.
#[derive(Clone, Debug, PartialEq)]
pub enum ProtocolAction {
    Broadcast(Packet),
    Unicast(NodeId, Packet),
    Drop {
        kind: PacketKind,
        src: NodeId,
        dst: NodeId,
        seq: Option<u64>,
        reason: DropReason,
    },
    Deliver(DataPacket),
    SetHeight {
        dst: NodeId,
        height: Height,
        cause: HeightCause,
    },
    DetectPartition {
        dst: NodeId,
        ref_level: RefLevel,
    },
}

/// What emptied a node's downstream set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum MaintainCause {
    LinkFailure,
    HeightChange,
}

#[derive(Clone, Debug, Default)]
struct ForwardRecord {
    at: SimTime,
    budget_out_us: u64,
}

/// Per-destination routing state.
#[derive(Clone, Debug)]
struct DestState {
    height: Height,
    route_required: bool,
    neighbor_heights: BTreeMap<NodeId, HeightTuple>,
    last_upd_time: Option<SimTime>,
    /// Delay to the destination via this node (its own NTT included),
    /// cached from the last update heard from a downstream neighbor.
    est_delay_us: Option<u64>,
    /// Queries already forwarded, keyed by source, while the route-required
    /// flag is set. Kept so a flood visits each node once per discovery
    /// round; a copy with a strictly larger remaining budget (or a copy
    /// arriving after the retry window) is forwarded again.
    forwarded_qry: BTreeMap<NodeId, ForwardRecord>,
    /// Queries this node answered with an update, keyed by source.
    answered_qry: BTreeMap<NodeId, SimTime>,
    /// Highest CLR reference level already processed for this destination.
    processed_clr: Option<RefLevel>,
}

impl DestState {
    fn new(height: Height) -> Self {
        DestState {
            height,
            route_required: false,
            neighbor_heights: BTreeMap::new(),
            last_upd_time: None,
            est_delay_us: None,
            forwarded_qry: BTreeMap::new(),
            answered_qry: BTreeMap::new(),
            processed_clr: None,
        }
    }

    fn downstream(&self) -> impl Iterator<Item = (&NodeId, &HeightTuple)> {
        let own = self.height;
        self.neighbor_heights
            .iter()
            .filter(move |(_, h)| Height::Value(**h) < own)
    }

    fn has_downstream(&self) -> bool {
        self.downstream().next().is_some()
    }
}

/// All routing, QoS, and energy state owned by one node.
#[derive(Clone, Debug)]
pub struct NodeState {
    pub id: NodeId,
    qos_enabled: bool,
    retry_window_us: u64,
    dests: BTreeMap<NodeId, DestState>,
    neighbors: BTreeSet<NodeId>,
    pub ntt: NttEstimator,
    pub energy: EnergyState,
}

impl NodeState {
    pub fn new(
        id: NodeId,
        qos_enabled: bool,
        retry_window_us: u64,
        ntt: NttEstimator,
        energy: EnergyState,
    ) -> Self {
        NodeState {
            id,
            qos_enabled,
            retry_window_us,
            dests: BTreeMap::new(),
            neighbors: BTreeSet::new(),
            ntt,
            energy,
        }
    }

    fn dest_entry(&mut self, dst: NodeId) -> &mut DestState {
        let own = self.id;
        self.dests.entry(dst).or_insert_with(|| {
            DestState::new(if dst == own {
                Height::destination(own)
            } else {
                Height::Null
            })
        })
    }

    pub fn height(&self, dst: NodeId) -> Height {
        if dst == self.id {
            return Height::destination(self.id);
        }
        self.dests.get(&dst).map_or(Height::Null, |d| d.height)
    }

    pub fn route_required(&self, dst: NodeId) -> bool {
        self.dests.get(&dst).is_some_and(|d| d.route_required)
    }

    pub fn neighbors(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.neighbors.iter().copied()
    }

    pub fn neighbor_height(&self, dst: NodeId, nbr: NodeId) -> Height {
        self.dests
            .get(&dst)
            .and_then(|d| d.neighbor_heights.get(&nbr))
            .map_or(Height::Null, |t| Height::Value(*t))
    }

    /// Neighbors with a height strictly below this node's, sorted by id.
    pub fn downstream_neighbors(&self, dst: NodeId) -> Vec<NodeId> {
        self.dests
            .get(&dst)
            .map(|d| d.downstream().map(|(id, _)| *id).collect())
            .unwrap_or_default()
    }

    pub fn has_route(&self, dst: NodeId) -> bool {
        self.dests.get(&dst).is_some_and(|d| d.has_downstream())
    }

    pub fn est_delay_us(&self, dst: NodeId) -> Option<u64> {
        self.dests.get(&dst).and_then(|d| d.est_delay_us)
    }

    /// Destinations this node currently holds a height for.
    fn active_dests(&self) -> Vec<NodeId> {
        self.dests
            .iter()
            .filter(|(_, d)| !d.height.is_null())
            .map(|(dst, _)| *dst)
            .collect()
    }

    /// Drop the route-required flag and the per-source flood bookkeeping so
    /// the next `initiate_route` starts a fresh discovery round.
    pub fn reset_route_request(&mut self, dst: NodeId) {
        let d = self.dest_entry(dst);
        d.route_required = false;
        d.forwarded_qry.clear();
    }

    /// Start route discovery toward `dst`. A node that already has a
    /// downstream link, or already has a discovery in flight, does nothing.
    pub fn initiate_route(
        &mut self,
        dst: NodeId,
        qos: &QosConstraint,
        _now: SimTime,
    ) -> Vec<ProtocolAction> {
        let qos_enabled = self.qos_enabled;
        let src = self.id;
        let d = self.dest_entry(dst);
        if d.has_downstream() || d.route_required {
            return Vec::new();
        }
        d.route_required = true;
        vec![ProtocolAction::Broadcast(Packet::Qry {
            src,
            dst,
            min_power_fraction: if qos_enabled {
                qos.min_power_fraction
            } else {
                0.0
            },
            delay_budget_us: qos.max_delay_us,
        })]
    }

    /// Process a received query.
    pub fn handle_qry(
        &mut self,
        src: NodeId,
        dst: NodeId,
        min_power_fraction: f64,
        delay_budget_us: u64,
        _from: NodeId,
        now: SimTime,
    ) -> Vec<ProtocolAction> {
        let drop = |reason| ProtocolAction::Drop {
            kind: PacketKind::Qry,
            src,
            dst,
            seq: None,
            reason,
        };

        if self.id == dst {
            // The destination answers with its own zero height; it neither
            // forwards data nor charges traverse time, so no admission check
            // runs here.
            let window = self.retry_window_us / 2;
            let d = self.dest_entry(dst);
            if d.answered_qry
                .get(&src)
                .is_some_and(|t| now.since(*t) < window)
            {
                return vec![drop(DropReason::Duplicate)];
            }
            d.answered_qry.insert(src, now);
            let height = Height::destination(dst).tuple().expect("destination height");
            return vec![ProtocolAction::Broadcast(Packet::Upd {
                dst,
                sender_height: height,
                accumulated_delay_us: 0,
            })];
        }
        if self.id == src {
            // Own query echoed back by the flood.
            return vec![drop(DropReason::Duplicate)];
        }

        let residual = self.energy.residual_fraction();
        let ntt_us = self.ntt.current_us();
        let qos_enabled = self.qos_enabled;
        let window = self.retry_window_us;
        let d = self.dest_entry(dst);
        let est = if d.height.is_null() {
            None
        } else {
            d.est_delay_us
        };
        let admission = if qos_enabled {
            let qos = QosConstraint {
                min_power_fraction,
                max_delay_us: delay_budget_us,
            };
            admit_query(residual, delay_budget_us, ntt_us, &qos, est)
        } else {
            AdmissionResult::Admit {
                remaining_budget_us: delay_budget_us,
            }
        };
        let remaining = match admission {
            AdmissionResult::RejectPower => {
                return vec![drop(DropReason::PowerReject {
                    residual,
                    threshold: min_power_fraction,
                })]
            }
            AdmissionResult::RejectDelay => return vec![drop(DropReason::DelayReject)],
            AdmissionResult::Admit {
                remaining_budget_us,
            } => remaining_budget_us,
        };

        if let Height::Value(own) = d.height {
            // Answer with the cached delay estimate toward the destination.
            if d.answered_qry
                .get(&src)
                .is_some_and(|t| now.since(*t) < window / 2)
            {
                return vec![drop(DropReason::Duplicate)];
            }
            d.answered_qry.insert(src, now);
            let acc = d.est_delay_us.unwrap_or(ntt_us);
            return vec![ProtocolAction::Broadcast(Packet::Upd {
                dst,
                sender_height: own,
                accumulated_delay_us: acc,
            })];
        }

        // No height: forward the query with the reduced budget, once per
        // source (unless this copy improves the budget or the previous
        // forward has aged out).
        let forward_again = match d.forwarded_qry.get(&src) {
            None => true,
            Some(rec) => remaining > rec.budget_out_us || now.since(rec.at) >= window,
        };
        if !forward_again {
            return vec![drop(DropReason::Duplicate)];
        }
        d.route_required = true;
        d.forwarded_qry.insert(
            src,
            ForwardRecord {
                at: now,
                budget_out_us: remaining,
            },
        );
        vec![ProtocolAction::Broadcast(Packet::Qry {
            src,
            dst,
            min_power_fraction,
            delay_budget_us: remaining,
        })]
    }

    /// Process a received update: record the sender's height, adopt a height
    /// if this node is waiting for a route, and otherwise run maintenance if
    /// the sender's new height removed the last downstream link.
    pub fn handle_upd(
        &mut self,
        dst: NodeId,
        sender: NodeId,
        sender_height: HeightTuple,
        accumulated_delay_us: u64,
        now: SimTime,
    ) -> Vec<ProtocolAction> {
        let mut out = Vec::new();
        let ntt_us = self.ntt.current_us();
        let own_id = self.id;
        let d = self.dest_entry(dst);

        // Updates carrying a failure reference level at or below an already
        // cleared one are leftovers from before the partition.
        if sender_height.level.tau > SimTime::ZERO
            && d.processed_clr.is_some_and(|c| sender_height.level <= c)
        {
            return vec![ProtocolAction::Drop {
                kind: PacketKind::Upd,
                src: sender,
                dst,
                seq: None,
                reason: DropReason::Stale,
            }];
        }

        let had_downstream = d.has_downstream();
        d.neighbor_heights.insert(sender, sender_height);
        d.last_upd_time = Some(now);

        if d.route_required && d.height.is_null() && dst != own_id {
            let adopted = HeightTuple {
                level: sender_height.level,
                delta: sender_height.delta + 1,
                id: own_id,
            };
            d.height = Height::Value(adopted);
            d.route_required = false;
            d.forwarded_qry.clear();
            let acc = accumulated_delay_us + ntt_us;
            d.est_delay_us = Some(acc);
            out.push(ProtocolAction::SetHeight {
                dst,
                height: Height::Value(adopted),
                cause: HeightCause::Adopt,
            });
            out.push(ProtocolAction::Broadcast(Packet::Upd {
                dst,
                sender_height: adopted,
                accumulated_delay_us: acc,
            }));
            return out;
        }

        if had_downstream && !d.has_downstream() {
            self.maintain(dst, MaintainCause::HeightChange, now, &mut out);
        } else if !d.height.is_null() && Height::Value(sender_height) < d.height {
            // Sender is (still) downstream; refresh the delay estimate.
            d.est_delay_us = Some(accumulated_delay_us + ntt_us);
        }
        out
    }

    /// Process a received clear: erase all state for the destination and
    /// re-flood the clear exactly once.
    pub fn handle_clr(
        &mut self,
        dst: NodeId,
        ref_level: RefLevel,
        _from: NodeId,
        now: SimTime,
    ) -> Vec<ProtocolAction> {
        let mut out = Vec::new();
        if dst == self.id {
            // The destination's own height is definitional; it never erases
            // itself and does not spread stale clears.
            return vec![ProtocolAction::Drop {
                kind: PacketKind::Clr,
                src: self.id,
                dst,
                seq: None,
                reason: DropReason::Stale,
            }];
        }
        let d = self.dest_entry(dst);
        if d.processed_clr.is_some_and(|c| ref_level <= c) {
            return vec![ProtocolAction::Drop {
                kind: PacketKind::Clr,
                src: self.id,
                dst,
                seq: None,
                reason: DropReason::Duplicate,
            }];
        }
        d.processed_clr = Some(ref_level);
        d.neighbor_heights.clear();
        d.est_delay_us = None;
        d.last_upd_time = Some(now);
        if !d.height.is_null() {
            d.height = Height::Null;
            out.push(ProtocolAction::SetHeight {
                dst,
                height: Height::Null,
                cause: HeightCause::Clear,
            });
        }
        out.push(ProtocolAction::Broadcast(Packet::Clr { dst, ref_level }));
        out
    }

    /// React to a link coming up or going down. On link-up the node
    /// re-advertises its heights so neighbor tables converge; on link-down
    /// it forgets the neighbor's heights and runs maintenance for every
    /// destination that just lost its last downstream link.
    pub fn on_link_event(&mut self, neighbor: NodeId, up: bool, now: SimTime) -> Vec<ProtocolAction> {
        let mut out = Vec::new();
        if up {
            self.neighbors.insert(neighbor);
            for dst in self.active_dests() {
                let d = &self.dests[&dst];
                if let Height::Value(own) = d.height {
                    out.push(ProtocolAction::Broadcast(Packet::Upd {
                        dst,
                        sender_height: own,
                        accumulated_delay_us: d.est_delay_us.unwrap_or(0),
                    }));
                }
            }
            return out;
        }

        self.neighbors.remove(&neighbor);
        let isolated = self.neighbors.is_empty();
        let own_id = self.id;
        let dests: Vec<NodeId> = self.dests.keys().copied().collect();
        for dst in dests {
            let d = self.dests.get_mut(&dst).expect("dest entry");
            let had_downstream = d.has_downstream();
            d.neighbor_heights.remove(&neighbor);
            if dst == own_id || d.height.is_null() {
                continue;
            }
            if isolated {
                d.height = Height::Null;
                d.est_delay_us = None;
                out.push(ProtocolAction::SetHeight {
                    dst,
                    height: Height::Null,
                    cause: HeightCause::Isolated,
                });
            } else if had_downstream && !d.has_downstream() {
                self.maintain(dst, MaintainCause::LinkFailure, now, &mut out);
            }
        }
        out
    }

    /// Forward (or deliver) a data packet using the lowest-height downstream
    /// neighbor.
    pub fn forward_data(&mut self, data: DataPacket, _now: SimTime) -> Vec<ProtocolAction> {
        if self.energy.is_dead() {
            return vec![ProtocolAction::Drop {
                kind: PacketKind::Data,
                src: data.src,
                dst: data.dst,
                seq: Some(data.seq),
                reason: DropReason::DeadNode,
            }];
        }
        if data.dst == self.id {
            return vec![ProtocolAction::Deliver(data)];
        }
        let next = self
            .dests
            .get(&data.dst)
            .and_then(|d| d.downstream().min_by_key(|(id, h)| (**h, **id)))
            .map(|(id, _)| *id);
        match next {
            Some(hop) => vec![ProtocolAction::Unicast(hop, Packet::Data(data))],
            None => vec![ProtocolAction::Drop {
                kind: PacketKind::Data,
                src: data.src,
                dst: data.dst,
                seq: Some(data.seq),
                reason: DropReason::NoRoute,
            }],
        }
    }

    /// Reference level that proves a partition: every neighbor holds this
    /// node's own reflected level.
    fn partition_level(&self, dst: NodeId) -> Option<RefLevel> {
        let d = self.dests.get(&dst)?;
        let mut level: Option<RefLevel> = None;
        for h in d.neighbor_heights.values() {
            if !h.level.reflected || h.level.oid != self.id {
                return None;
            }
            match level {
                None => level = Some(h.level),
                Some(l) if l == h.level => {}
                Some(_) => return None,
            }
        }
        level
    }

    /// Check the partition condition and, when it holds, erase this node's
    /// state for `dst` and originate a CLR flood.
    pub fn check_partition(&mut self, dst: NodeId, _now: SimTime) -> Vec<ProtocolAction> {
        let Some(level) = self.partition_level(dst) else {
            return Vec::new();
        };
        let d = self.dest_entry(dst);
        let mut out = vec![ProtocolAction::DetectPartition {
            dst,
            ref_level: level,
        }];
        d.processed_clr = Some(match d.processed_clr {
            Some(c) if c > level => c,
            _ => level,
        });
        d.height = Height::Null;
        d.neighbor_heights.clear();
        d.est_delay_us = None;
        out.push(ProtocolAction::SetHeight {
            dst,
            height: Height::Null,
            cause: HeightCause::Clear,
        });
        out.push(ProtocolAction::Broadcast(Packet::Clr {
            dst,
            ref_level: level,
        }));
        out
    }

    /// Route maintenance after the downstream set emptied. The cause decides
    /// the new height: failures generate a fresh reference level; height
    /// changes propagate, reflect, or — when a node's own reflected level
    /// surrounds it — detect a partition.
    fn maintain(
        &mut self,
        dst: NodeId,
        cause: MaintainCause,
        now: SimTime,
        out: &mut Vec<ProtocolAction>,
    ) {
        if dst == self.id {
            return;
        }
        let own_id = self.id;
        let d = self.dests.get_mut(&dst).expect("dest entry");
        if d.height.is_null() || d.neighbor_heights.is_empty() {
            // Nothing to reverse against; hold the height until a neighbor
            // advertises one.
            return;
        }

        let new_height = match cause {
            MaintainCause::LinkFailure => new_reference_level(now, own_id)
                .tuple()
                .expect("reference level"),
            MaintainCause::HeightChange => {
                let mut levels: BTreeSet<RefLevel> =
                    d.neighbor_heights.values().map(|h| h.level).collect();
                if levels.len() == 1 {
                    let level = levels.pop_first().expect("one level");
                    if !level.reflected && level.tau > SimTime::ZERO {
                        // Everyone joined one failure level and still ended
                        // up here: bounce it back.
                        let reflected = HeightTuple {
                            level: level.reflect(),
                            delta: 0,
                            id: own_id,
                        };
                        self.apply_height(dst, reflected, HeightCause::Reflect, out);
                        return;
                    }
                    if level.reflected && level.oid == own_id {
                        let actions = self.check_partition(dst, now);
                        out.extend(actions);
                        return;
                    }
                    // Someone else's reflection (or the zero level, which
                    // cannot rise): start a fresh search for a route.
                    new_reference_level(now, own_id)
                        .tuple()
                        .expect("reference level")
                } else {
                    // Mixed levels: join the highest one just below its
                    // lowest member.
                    let lmax = *levels.last().expect("nonempty levels");
                    let dmin = d
                        .neighbor_heights
                        .values()
                        .filter(|h| h.level == lmax)
                        .map(|h| h.delta)
                        .min()
                        .expect("level member");
                    HeightTuple {
                        level: lmax,
                        delta: dmin - 1,
                        id: own_id,
                    }
                }
            }
        };
        let cause = match cause {
            MaintainCause::LinkFailure => HeightCause::Reverse,
            MaintainCause::HeightChange => {
                if new_height.level.oid == own_id && !new_height.level.reflected {
                    HeightCause::Regenerate
                } else {
                    HeightCause::Propagate
                }
            }
        };
        self.apply_height(dst, new_height, cause, out);
    }

    fn apply_height(
        &mut self,
        dst: NodeId,
        height: HeightTuple,
        cause: HeightCause,
        out: &mut Vec<ProtocolAction>,
    ) {
        let d = self.dests.get_mut(&dst).expect("dest entry");
        d.height = Height::Value(height);
        // The old delay estimate described a route that no longer exists.
        d.est_delay_us = None;
        out.push(ProtocolAction::SetHeight {
            dst,
            height: Height::Value(height),
            cause,
        });
        out.push(ProtocolAction::Broadcast(Packet::Upd {
            dst,
            sender_height: height,
            accumulated_delay_us: 0,
        }));
    }
}
