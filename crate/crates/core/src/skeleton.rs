//! Keypoint graph: names, parent hierarchy and left/right swap pairs.
//!
//! The on-disk form is a three column CSV (`name,parent,swap`) with empty
//! cells for missing parent or swap. Row order is the canonical keypoint
//! order used for map channels and pose rows everywhere else.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result, SkeletonIssue};

/// The nine point pig skeleton.
pub const PIG_SKELETON_CSV: &str = "\
name,parent,swap
snout,,
head,snout,
neck,head,
forelegL1,neck,forelegR1
forelegR1,neck,forelegL1
hindlegL1,tailbase,hindlegR1
hindlegR1,tailbase,hindlegL1
tailbase,,
tailtip,tailbase,
";

const HEADER: [&str; 3] = ["name", "parent", "swap"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeypointDef {
    pub name: String,
    pub parent: Option<usize>,
    pub swap: Option<usize>,
}

/// A validated keypoint forest. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skeleton {
    keypoints: Vec<KeypointDef>,
    edges: Vec<(usize, usize)>,
}

/// Data rows start on line 2 of the file.
fn row_of(index: usize) -> usize {
    index + 2
}

impl Skeleton {
    /// Validates index-based definitions. Errors carry the CSV row the
    /// offending keypoint would occupy.
    pub fn from_defs(keypoints: Vec<KeypointDef>) -> Result<Self> {
        let n = keypoints.len();
        if n == 0 {
            return Err(Error::Skeleton {
                row: 1,
                issue: SkeletonIssue::Empty,
            });
        }
        let mut seen = HashMap::with_capacity(n);
        for (i, kp) in keypoints.iter().enumerate() {
            let err = |issue| Error::Skeleton { row: row_of(i), issue };
            if kp.name.is_empty() {
                return Err(err(SkeletonIssue::EmptyName));
            }
            if seen.insert(kp.name.as_str(), i).is_some() {
                return Err(err(SkeletonIssue::DuplicateName(kp.name.clone())));
            }
            if let Some(p) = kp.parent {
                if p >= n {
                    return Err(err(SkeletonIssue::UnknownParent(p.to_string())));
                }
            }
            if let Some(s) = kp.swap {
                if s >= n {
                    return Err(err(SkeletonIssue::UnknownSwap(s.to_string())));
                }
            }
        }
        for (i, kp) in keypoints.iter().enumerate() {
            if let Some(s) = kp.swap {
                let issue = if s == i {
                    Some(SkeletonIssue::SelfSwap)
                } else if keypoints[s].swap != Some(i) {
                    Some(SkeletonIssue::AsymmetricSwap)
                } else {
                    None
                };
                if let Some(issue) = issue {
                    return Err(Error::Skeleton { row: row_of(i), issue });
                }
            }
        }
        // A walk up the parent chain longer than n must revisit a node.
        for start in 0..n {
            let mut cur = keypoints[start].parent;
            let mut steps = 0;
            while let Some(p) = cur {
                steps += 1;
                if p == start || steps > n {
                    return Err(Error::Skeleton {
                        row: row_of(start),
                        issue: SkeletonIssue::ParentCycle,
                    });
                }
                cur = keypoints[p].parent;
            }
        }
        let edges = keypoints
            .iter()
            .enumerate()
            .filter_map(|(child, kp)| kp.parent.map(|p| (p, child)))
            .collect();
        Ok(Skeleton { keypoints, edges })
    }

    pub fn parse(csv_text: &str) -> Result<Self> {
        let mut lines = csv_text.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l));
        let header = lines.next().unwrap_or_default();
        let header_fields: Vec<&str> = header.split(',').map(str::trim).collect();
        if header_fields != HEADER {
            return Err(Error::Skeleton {
                row: 1,
                issue: SkeletonIssue::BadHeader,
            });
        }

        // (row, name, parent, swap)
        let mut rows: Vec<(usize, String, String, String)> = Vec::new();
        for (offset, line) in lines.enumerate() {
            let row = offset + 2;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(Error::Skeleton {
                    row,
                    issue: SkeletonIssue::FieldCount(fields.len()),
                });
            }
            rows.push((row, fields[0].into(), fields[1].into(), fields[2].into()));
        }
        if rows.is_empty() {
            return Err(Error::Skeleton {
                row: 2,
                issue: SkeletonIssue::Empty,
            });
        }

        let mut index = HashMap::new();
        for (i, (row, name, _, _)) in rows.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::Skeleton {
                    row: *row,
                    issue: SkeletonIssue::EmptyName,
                });
            }
            if index.insert(name.as_str(), i).is_some() {
                return Err(Error::Skeleton {
                    row: *row,
                    issue: SkeletonIssue::DuplicateName(name.clone()),
                });
            }
        }
        let resolve = |cell: &str, row: usize, unknown: fn(String) -> SkeletonIssue| {
            if cell.is_empty() {
                return Ok(None);
            }
            index.get(cell).copied().map(Some).ok_or_else(|| Error::Skeleton {
                row,
                issue: unknown(cell.to_string()),
            })
        };
        let mut defs = Vec::with_capacity(rows.len());
        for (row, name, parent, swap) in &rows {
            defs.push(KeypointDef {
                name: name.clone(),
                parent: resolve(parent, *row, SkeletonIssue::UnknownParent)?,
                swap: resolve(swap, *row, SkeletonIssue::UnknownSwap)?,
            });
        }

        // Blank lines shift file rows; map validation errors back to them.
        Skeleton::from_defs(defs).map_err(|e| match e {
            Error::Skeleton { row, issue } => Error::Skeleton {
                row: row.checked_sub(2).and_then(|i| rows.get(i)).map_or(row, |r| r.0),
                issue,
            },
            other => other,
        })
    }

    pub fn pig() -> Self {
        Skeleton::parse(PIG_SKELETON_CSV).expect("built-in skeleton is valid")
    }

    /// Canonical CSV form; `parse(to_csv())` is the identity.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,parent,swap\n");
        for kp in &self.keypoints {
            let name_of = |i: Option<usize>| i.map_or("", |i| self.keypoints[i].name.as_str());
            let _ = writeln!(out, "{},{},{}", kp.name, name_of(kp.parent), name_of(kp.swap));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn keypoints(&self) -> &[KeypointDef] {
        &self.keypoints
    }

    pub fn name(&self, index: usize) -> &str {
        &self.keypoints[index].name
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.keypoints.iter().position(|k| k.name == name)
    }

    /// `(parent, child)` pairs sorted by child index.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Index `i` maps to its swap partner, or to itself. Always an involution.
    pub fn swap_permutation(&self) -> Vec<usize> {
        self.keypoints
            .iter()
            .enumerate()
            .map(|(i, kp)| kp.swap.unwrap_or(i))
            .collect()
    }

    /// Unordered swap pairs, each listed once as `(lower, higher)`.
    pub fn swap_pairs(&self) -> Vec<(usize, usize)> {
        self.keypoints
            .iter()
            .enumerate()
            .filter_map(|(i, kp)| kp.swap.filter(|&s| s > i).map(|s| (i, s)))
            .collect()
    }

    /// Hex SHA-256 of the canonical CSV. Checkpoints use it to refuse a
    /// mismatched skeleton.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pig_skeleton_shape() {
        let s = Skeleton::pig();
        assert_eq!(s.len(), 9);
        assert_eq!(s.edges().len(), 7);
        let names = |pairs: Vec<(usize, usize)>| -> Vec<(String, String)> {
            pairs
                .into_iter()
                .map(|(a, b)| (s.name(a).to_string(), s.name(b).to_string()))
                .collect()
        };
        assert_eq!(
            names(s.swap_pairs()),
            vec![
                ("forelegL1".into(), "forelegR1".into()),
                ("hindlegL1".into(), "hindlegR1".into())
            ]
        );
        assert_eq!(
            names(s.edges().to_vec()),
            [
                ("snout", "head"),
                ("head", "neck"),
                ("neck", "forelegL1"),
                ("neck", "forelegR1"),
                ("tailbase", "hindlegL1"),
                ("tailbase", "hindlegR1"),
                ("tailbase", "tailtip"),
            ]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect::<Vec<_>>()
        );
    }

    #[test]
    fn pig_swap_permutation() {
        let s = Skeleton::pig();
        let perm = s.swap_permutation();
        assert_eq!(perm, vec![0, 1, 2, 4, 3, 6, 5, 7, 8]);
        let moved = perm.iter().enumerate().filter(|(i, p)| i != *p).count();
        assert_eq!(moved, 4);
    }

    #[test]
    fn minimal_skeleton() {
        let s = Skeleton::parse("name,parent,swap\nsnout,,").unwrap();
        assert_eq!(s.len(), 1);
        assert!(s.edges().is_empty());
        assert_eq!(s.swap_permutation(), vec![0]);
    }

    #[test]
    fn chain_has_two_edges() {
        let s = Skeleton::parse("name,parent,swap\na,,\nb,a,\nc,b,\n").unwrap();
        assert_eq!(s.edges(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn asymmetric_swap_reports_row() {
        let err = Skeleton::parse("name,parent,swap\na,,b\nb,,\n").unwrap_err();
        assert_eq!(err.to_string(), "asymmetric swap at row 2");
    }

    #[test]
    fn validation_errors() {
        let cases = [
            ("name,parent,swap\na,,\na,,\n", "duplicate name `a` at row 3"),
            ("name,parent,swap\na,zz,\n", "unknown parent `zz` at row 2"),
            ("name,parent,swap\na,,zz\n", "unknown swap `zz` at row 2"),
            ("name,parent,swap\na,b,\nb,a,\n", "parent cycle at row 2"),
            ("name,parent,swap\na,a,\n", "parent cycle at row 2"),
            ("name,parent,swap\na,,a\n", "keypoint swaps with itself at row 2"),
            ("name,parent,swap\na,,\n,,\n", "empty name at row 3"),
            ("name,parent\na,\n", "missing or malformed header (expected `name,parent,swap`) at row 1"),
            ("name,parent,swap\na,,,\n", "expected 3 fields, found 4 at row 2"),
        ];
        for (csv, msg) in cases {
            assert_eq!(Skeleton::parse(csv).unwrap_err().to_string(), msg, "{csv:?}");
        }
    }

    #[test]
    fn whitespace_trimmed_and_case_sensitive() {
        let s = Skeleton::parse("name,parent,swap\n A , , B \n B ,A ,A\n").unwrap();
        assert_eq!(s.name(0), "A");
        assert_eq!(s.keypoints()[1].parent, Some(0));
        assert!(Skeleton::parse("name,parent,swap\nA,,\nb,a,\n").is_err());
    }

    #[test]
    fn canonical_csv_matches_builtin() {
        assert_eq!(Skeleton::pig().to_csv(), PIG_SKELETON_CSV);
    }

    fn arb_skeleton() -> impl Strategy<Value = Skeleton> {
        (1usize..12)
            .prop_flat_map(|n| {
                (
                    Just(n),
                    proptest::collection::vec(proptest::option::of(0usize..n), n),
                    proptest::collection::vec(any::<bool>(), n),
                )
            })
            .prop_map(|(n, parents, pair_flags)| {
                // parents point to lower indices only, so the forest is acyclic
                let mut defs: Vec<KeypointDef> = (0..n)
                    .map(|i| KeypointDef {
                        name: format!("kp{i}"),
                        parent: parents[i].filter(|&p| p < i),
                        swap: None,
                    })
                    .collect();
                let mut i = 0;
                while i + 1 < n {
                    if pair_flags[i] {
                        defs[i].swap = Some(i + 1);
                        defs[i + 1].swap = Some(i);
                        i += 2;
                    } else {
                        i += 1;
                    }
                }
                Skeleton::from_defs(defs).unwrap()
            })
    }

    proptest! {
        #[test]
        fn csv_round_trip(s in arb_skeleton()) {
            prop_assert_eq!(Skeleton::parse(&s.to_csv()).unwrap(), s);
        }

        #[test]
        fn swap_permutation_is_involution(s in arb_skeleton()) {
            let p = s.swap_permutation();
            for i in 0..p.len() {
                prop_assert_eq!(p[p[i]], i);
            }
        }
    }
}
