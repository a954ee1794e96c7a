//! TORA height algebra.
//!
//! Every node carries one height per destination. Heights are totally
//! ordered; each link is directed from the higher endpoint to the lower one,
//! which makes the per-destination routing graph a DAG with the destination
//! as the unique sink. Route maintenance raises heights by issuing new
//! reference levels, and the reflection bit on a reference level is what
//! lets a node conclude that its component has been cut off from the
//! destination.

use std::cmp::Ordering;
use std::fmt;

use crate::types::{NodeId, SimTime};

/// The `(tau, oid, r)` prefix of a height.
///
/// `tau` is the time the level was created (zero for destination-rooted
/// heights), `oid` the node that created it, and `reflected` the bit set when
/// the level bounces back from a dead end.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RefLevel {
    pub tau: SimTime,
    pub oid: NodeId,
    pub reflected: bool,
}

impl RefLevel {
    /// The destination-rooted level shared by all heights built during
    /// ordinary route creation.
    pub const ZERO: RefLevel = RefLevel {
        tau: SimTime::ZERO,
        oid: NodeId(0),
        reflected: false,
    };

    pub fn reflect(self) -> RefLevel {
        RefLevel {
            reflected: true,
            ..self
        }
    }
}

impl fmt::Display for RefLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}:{}",
            self.tau,
            self.oid,
            if self.reflected { 1 } else { 0 }
        )
    }
}

/// A concrete (non-null) height: reference level, distance offset, and the
/// owning node id as the final tie-breaker.
///
/// Field order matches comparison order, so the derived `Ord` is the
/// lexicographic order on `(tau, oid, r, delta, id)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HeightTuple {
    pub level: RefLevel,
    pub delta: i64,
    pub id: NodeId,
}

impl fmt::Display for HeightTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}:{}:{})", self.level, self.delta, self.id)
    }
}

/// A node's height for one destination. `Null` means "no route known" and
/// compares greater than every concrete height, so a null neighbor is never
/// downstream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Height {
    Value(HeightTuple),
    Null,
}

impl Height {
    /// The destination's own height: `(0, 0, 0, 0, dest_id)`.
    pub fn destination(dest: NodeId) -> Height {
        Height::Value(HeightTuple {
            level: RefLevel::ZERO,
            delta: 0,
            id: dest,
        })
    }

    pub fn new(tau: SimTime, oid: NodeId, reflected: bool, delta: i64, id: NodeId) -> Height {
        Height::Value(HeightTuple {
            level: RefLevel {
                tau,
                oid,
                reflected,
            },
            delta,
            id,
        })
    }

    pub fn is_null(self) -> bool {
        matches!(self, Height::Null)
    }

    pub fn tuple(self) -> Option<HeightTuple> {
        match self {
            Height::Value(t) => Some(t),
            Height::Null => None,
        }
    }
}

impl From<HeightTuple> for Height {
    fn from(t: HeightTuple) -> Height {
        Height::Value(t)
    }
}

impl fmt::Display for Height {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Height::Value(t) => t.fmt(f),
            Height::Null => write!(f, "null"),
        }
    }
}

/// Direction of a link as seen from `own`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinkDirection {
    /// Neighbor is lower: traffic flows toward it.
    Downstream,
    /// Neighbor is higher.
    Upstream,
    /// At least one endpoint has no height; the link carries no direction.
    Undirected,
}

/// Total order on heights. `Null` sorts above everything; two nulls are
/// equal.
pub fn compare_heights(a: Height, b: Height) -> Ordering {
    a.cmp(&b)
}

/// Direction of the link between `own` and `neighbor`, from `own`'s side.
pub fn link_direction(own: Height, neighbor: Height) -> LinkDirection {
    if own.is_null() || neighbor.is_null() {
        return LinkDirection::Undirected;
    }
    match neighbor.cmp(&own) {
        Ordering::Less => LinkDirection::Downstream,
        Ordering::Greater => LinkDirection::Upstream,
        // Equal heights cannot occur between distinct nodes (id tie-break);
        // a node compared against itself has no directed link.
        Ordering::Equal => LinkDirection::Undirected,
    }
}

/// A fresh reference level `(now, self, 0, 0, self)`, created when a node
/// loses its last downstream link. Strictly greater than every height with a
/// smaller `tau`.
pub fn new_reference_level(now: SimTime, self_id: NodeId) -> Height {
    Height::new(now, self_id, false, 0, self_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn h(tau: u64, oid: u16, r: bool, delta: i64, id: u16) -> Height {
        Height::new(SimTime::from_ms(tau), NodeId(oid), r, delta, NodeId(id))
    }

    #[test]
    fn identical_heights_compare_equal() {
        assert_eq!(
            compare_heights(h(0, 0, false, 1, 5), h(0, 0, false, 1, 5)),
            Ordering::Equal
        );
    }

    #[test]
    fn delta_dominates_id() {
        assert_eq!(
            compare_heights(h(0, 0, false, 1, 3), h(0, 0, false, 2, 9)),
            Ordering::Less
        );
    }

    #[test]
    fn null_is_greater_than_any_value() {
        assert_eq!(
            compare_heights(Height::Null, h(7, 4, true, 0, 2)),
            Ordering::Greater
        );
        assert_eq!(compare_heights(Height::Null, Height::Null), Ordering::Equal);
    }

    #[test]
    fn lower_delta_is_downstream() {
        let own = h(0, 0, false, 2, 1);
        let nbr = h(0, 0, false, 1, 7);
        assert_eq!(link_direction(own, nbr), LinkDirection::Downstream);
        assert_eq!(link_direction(nbr, own), LinkDirection::Upstream);
        assert_eq!(link_direction(own, Height::Null), LinkDirection::Undirected);
    }

    #[test]
    fn reference_level_shape_and_ordering() {
        let now = SimTime::from_ms(40);
        let lvl = new_reference_level(now, NodeId(6));
        assert_eq!(lvl, h(40, 6, false, 0, 6));
        // tau dominates every destination-rooted height
        assert_eq!(compare_heights(lvl, h(0, 0, false, 3, 2)), Ordering::Greater);
        let later = new_reference_level(SimTime::from_ms(41), NodeId(6));
        assert_eq!(compare_heights(later, lvl), Ordering::Greater);
    }

    #[test]
    fn destination_height_is_all_zero() {
        assert_eq!(Height::destination(NodeId(7)), h(0, 0, false, 0, 7));
    }

    fn arb_height() -> impl Strategy<Value = Height> {
        prop_oneof![
            1 => Just(Height::Null),
            9 => (0u64..50, 0u16..8, any::<bool>(), -4i64..8, 0u16..8).prop_map(
                |(tau, oid, r, delta, id)| h(tau, oid, r, delta, id)
            ),
        ]
    }

    proptest! {
        #[test]
        fn order_is_total_and_consistent(a in arb_height(), b in arb_height(), c in arb_height()) {
            prop_assert_eq!(compare_heights(a, a), Ordering::Equal);
            prop_assert_eq!(compare_heights(a, b), compare_heights(b, a).reverse());
            if compare_heights(a, b) != Ordering::Greater
                && compare_heights(b, c) != Ordering::Greater
            {
                prop_assert_ne!(compare_heights(a, c), Ordering::Greater);
            }
        }

        #[test]
        fn direction_is_antisymmetric(a in arb_height(), b in arb_height()) {
            let ab = link_direction(a, b);
            let ba = link_direction(b, a);
            match ab {
                LinkDirection::Downstream => prop_assert_eq!(ba, LinkDirection::Upstream),
                LinkDirection::Upstream => prop_assert_eq!(ba, LinkDirection::Downstream),
                LinkDirection::Undirected => prop_assert_eq!(ba, LinkDirection::Undirected),
            }
        }

        /// Orienting the edges of any graph by distinct heights yields a DAG.
        #[test]
        fn induced_graph_is_acyclic(
            n in 2usize..50,
            edge_bits in proptest::collection::vec(any::<bool>(), 50 * 49 / 2),
            taus in proptest::collection::vec(0u64..5, 50),
            deltas in proptest::collection::vec(-3i64..6, 50),
        ) {
            // Distinct heights are guaranteed by the id component.
            let heights: Vec<Height> = (0..n)
                .map(|i| h(taus[i], (i % 5) as u16, false, deltas[i], i as u16))
                .collect();
            let mut adj = vec![Vec::new(); n];
            let mut indeg = vec![0usize; n];
            let mut k = 0;
            for i in 0..n {
                for j in (i + 1)..n {
                    if edge_bits[k] {
                        // edge from higher to lower height
                        let (from, to) = if compare_heights(heights[i], heights[j])
                            == Ordering::Greater
                        {
                            (i, j)
                        } else {
                            (j, i)
                        };
                        adj[from].push(to);
                        indeg[to] += 1;
                    }
                    k += 1;
                }
            }
            // Kahn's algorithm must consume every vertex.
            let mut ready: Vec<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
            let mut seen = 0;
            while let Some(v) = ready.pop() {
                seen += 1;
                for &w in &adj[v] {
                    indeg[w] -= 1;
                    if indeg[w] == 0 {
                        ready.push(w);
                    }
                }
            }
            prop_assert_eq!(seen, n);
        }

        #[test]
        fn new_level_tops_older_heights(t in 1u64..1000, id in 0u16..50, older in arb_height()) {
            let lvl = new_reference_level(SimTime::from_ms(t), NodeId(id));
            if let Some(tup) = older.tuple() {
                if tup.level.tau < SimTime::from_ms(t) {
                    prop_assert_eq!(compare_heights(lvl, older), Ordering::Greater);
                }
            }
        }
    }
}
