//! Superclass partitions of the fine-grained label space.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

/// Total, disjoint assignment of fine classes `0..n_classes` to superclasses
/// `0..N`. Within a superclass, members are kept in ascending fine-class
/// order, which defines the owning expert's local output index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct SuperclassMap {
    assignment: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl TryFrom<Vec<usize>> for SuperclassMap {
    type Error = Error;

    fn try_from(assignment: Vec<usize>) -> Result<Self> {
        SuperclassMap::from_assignment(assignment)
    }
}

impl From<SuperclassMap> for Vec<usize> {
    fn from(map: SuperclassMap) -> Self {
        map.assignment
    }
}

impl SuperclassMap {
    /// `assignment[fine] = superclass`.
    pub fn from_assignment(assignment: Vec<usize>) -> Result<Self> {
        if assignment.is_empty() {
            return Err(Error::MissingClass(0));
        }
        let n = assignment.iter().max().unwrap() + 1;
        let mut members = vec![Vec::new(); n];
        for (fine, &sup) in assignment.iter().enumerate() {
            members[sup].push(fine);
        }
        if let Some(empty) = members.iter().position(Vec::is_empty) {
            return Err(Error::EmptySuperclass(empty));
        }
        Ok(SuperclassMap {
            assignment,
            members,
        })
    }

    /// Parses the `<fine_id>\t<superclass_id>` text format. Lines starting
    /// with `#` and blank lines are ignored; trailing `#` comments are allowed.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let (Some(a), Some(b), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(Error::MapSyntax {
                    line: lineno + 1,
                    reason: "expected `<fine_id>\\t<superclass_id>`".into(),
                });
            };
            let parse = |s: &str| {
                s.parse::<usize>().map_err(|_| Error::MapSyntax {
                    line: lineno + 1,
                    reason: format!("`{s}` is not a non-negative integer"),
                })
            };
            pairs.push((parse(a)?, parse(b)?));
        }
        let Some(max_fine) = pairs.iter().map(|p| p.0).max() else {
            return Err(Error::MissingClass(0));
        };
        let mut assignment: Vec<Option<usize>> = vec![None; max_fine + 1];
        for (fine, sup) in pairs {
            if assignment[fine].replace(sup).is_some() {
                return Err(Error::DuplicateClass(fine));
            }
        }
        let assignment = assignment
            .into_iter()
            .enumerate()
            .map(|(fine, s)| s.ok_or(Error::MissingClass(fine)))
            .collect::<Result<Vec<_>>>()?;
        SuperclassMap::from_assignment(assignment)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SuperclassMap::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (fine, sup) in self.assignment.iter().enumerate() {
            let _ = writeln!(out, "{fine}\t{sup}");
        }
        out
    }

    /// Superclasses of equal-width contiguous ranges, e.g. `{0..4, 5..9}`.
    pub fn contiguous(sizes: &[usize]) -> Result<Self> {
        let assignment = sizes
            .iter()
            .enumerate()
            .flat_map(|(s, &n)| std::iter::repeat_n(s, n))
            .collect();
        SuperclassMap::from_assignment(assignment)
    }

    pub fn n_superclasses(&self) -> usize {
        self.members.len()
    }

    pub fn n_classes(&self) -> usize {
        self.assignment.len()
    }

    pub fn superclass_of(&self, fine: usize) -> Option<usize> {
        self.assignment.get(fine).copied()
    }

    /// Member fine classes of superclass `i` in local index order.
    pub fn members(&self, i: usize) -> &[usize] {
        &self.members[i]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    pub fn local_index(&self, fine: usize) -> Option<usize> {
        let sup = self.superclass_of(fine)?;
        self.members[sup].iter().position(|&c| c == fine)
    }

    /// Appends one superclass holding `new_classes`, which must be exactly the
    /// next fine ids `n_classes..n_classes + m` (so existing output indices
    /// stay valid after flat increment).
    pub fn with_new_superclass(&self, new_classes: &[usize]) -> Result<Self> {
        if new_classes.is_empty() {
            return Err(Error::EmptySuperclass(self.n_superclasses()));
        }
        let overlapping: Vec<usize> = new_classes
            .iter()
            .copied()
            .filter(|&c| c < self.n_classes())
            .collect();
        if !overlapping.is_empty() {
            return Err(Error::OverlappingClasses(overlapping));
        }
        let mut sorted = new_classes.to_vec();
        sorted.sort_unstable();
        for w in sorted.windows(2) {
            if w[0] == w[1] {
                return Err(Error::DuplicateClass(w[0]));
            }
        }
        let expected: Vec<usize> = (self.n_classes()..self.n_classes() + sorted.len()).collect();
        if let Some((&want, _)) = expected.iter().zip(&sorted).find(|(a, b)| a != b) {
            return Err(Error::MissingClass(want));
        }
        let mut assignment = self.assignment.clone();
        assignment.extend(std::iter::repeat_n(self.n_superclasses(), sorted.len()));
        SuperclassMap::from_assignment(assignment)
    }

    /// Checks that `other` is this map plus exactly one appended superclass and
    /// returns the new classes.
    pub fn new_classes_in(&self, other: &SuperclassMap) -> Result<Vec<usize>> {
        if other.n_superclasses() != self.n_superclasses() + 1
            || other.assignment[..self.n_classes().min(other.n_classes())] != self.assignment[..]
        {
            return Err(Error::Config(
                "incremental map must keep every existing assignment and add exactly one superclass".into(),
            ));
        }
        let new = other.members(self.n_superclasses()).to_vec();
        self.with_new_superclass(&new)?;
        Ok(new)
    }
}

/// Images plus fine labels. The first tensor axis is the sample axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<S> {
    pub images: Tensor<S>,
    pub labels: Vec<usize>,
}

impl<S: Scalar> LabeledDataset<S> {
    pub fn new(images: Tensor<S>, labels: Vec<usize>) -> Result<Self> {
        if images.batch() != labels.len() {
            return Err(Error::CountMismatch {
                images: images.batch(),
                labels: labels.len(),
            });
        }
        Ok(LabeledDataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape (without the sample axis).
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        LabeledDataset {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Keeps samples whose label satisfies `keep`, in original order.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        self.subset(&idx)
    }

    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..self.len().min(n)).collect();
        self.subset(&idx)
    }

    pub fn histogram(&self, n_classes: usize) -> Vec<usize> {
        let mut h = vec![0; n_classes];
        for &l in &self.labels {
            if l < n_classes {
                h[l] += 1;
            }
        }
        h
    }

    pub fn convert<T: Scalar>(&self) -> LabeledDataset<T> {
        LabeledDataset {
            images: self.images.convert(),
            labels: self.labels.clone(),
        }
    }
}

/// Replaces each fine label by its superclass label; images are untouched.
pub fn relabel_superclass<S: Scalar>(
    ds: &LabeledDataset<S>,
    map: &SuperclassMap,
) -> Result<LabeledDataset<S>> {
    let labels = ds
        .labels
        .iter()
        .map(|&l| map.superclass_of(l).ok_or(Error::UncoveredLabel(l)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledDataset {
        images: ds.images.clone(),
        labels,
    })
}

/// The samples of one superclass, relabeled to local indices.
#[derive(Debug, Clone)]
pub struct SuperclassSubset<S> {
    pub data: LabeledDataset<S>,
    /// Index of each retained sample in the source dataset.
    pub source_indices: Vec<usize>,
    /// `local_to_global[local] = fine class`.
    pub local_to_global: Vec<usize>,
}

pub fn restrict_to_superclass<S: Scalar>(
    ds: &LabeledDataset<S>,
    map: &SuperclassMap,
    i: usize,
) -> Result<SuperclassSubset<S>> {
    if i >= map.n_superclasses() {
        return Err(Error::InvalidSuperclass {
            id: i,
            n: map.n_superclasses(),
        });
    }
    let mut source_indices = Vec::new();
    let mut local = Vec::new();
    for (idx, &l) in ds.labels.iter().enumerate() {
        let sup = map.superclass_of(l).ok_or(Error::UncoveredLabel(l))?;
        if sup == i {
            source_indices.push(idx);
            local.push(map.local_index(l).expect("covered label"));
        }
    }
    Ok(SuperclassSubset {
        data: LabeledDataset {
            images: ds.images.select(&source_indices),
            labels: local,
        },
        source_indices,
        local_to_global: map.members(i).to_vec(),
    })
}
