//! Tree-structured label spaces and exact marginalization between levels.
//!
//! Levels are indexed from 0 (coarsest, e.g. Kingdom) to `leaf_level()`
//! (finest, e.g. Species). Classes are indexed lexicographically by name
//! within each level, so a taxonomy built from the same set of leaf paths
//! always has the same indexing.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_LEVEL_NAMES: [&str; 7] = [
    "Kingdom", "Phylum", "Class", "Order", "Family", "Genus", "Species",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Taxonomy {
    level_names: Vec<String>,
    class_names: Vec<Vec<String>>,
    // parent_of[l][c] is the parent of class c (level l) at level l - 1; empty for l = 0.
    parent_of: Vec<Vec<usize>>,
    // leaf_ancestors[l][leaf]
    leaf_ancestors: Vec<Vec<usize>>,
    name_index: Vec<HashMap<String, usize>>,
}

impl Taxonomy {
    /// Builds a taxonomy from per-leaf ancestor tuples, coarsest name first.
    ///
    /// Identical duplicate paths are merged. A `(level, name)` pair that
    /// shows up under two different parents is rejected.
    pub fn build<S: AsRef<str>>(level_names: &[S], leaf_paths: &[Vec<String>]) -> Result<Self> {
        let depth = level_names.len();
        if depth < 2 {
            return Err(Error::config(
                "level_names",
                format!("a taxonomy needs at least 2 levels, got {depth}"),
            ));
        }
        let level_names: Vec<String> = level_names.iter().map(|s| s.as_ref().to_string()).collect();
        for name in &level_names {
            validate_name(name, "level_names")?;
        }
        if leaf_paths.is_empty() {
            return Err(Error::EmptyInput("no leaf paths".into()));
        }

        // level -> (name -> parent name)
        let mut members: Vec<BTreeMap<&str, Option<&str>>> = vec![BTreeMap::new(); depth];
        for path in leaf_paths {
            if path.len() != depth {
                return Err(Error::DimensionMismatch {
                    what: "leaf path length",
                    expected: depth,
                    got: path.len(),
                });
            }
            for (level, name) in path.iter().enumerate() {
                validate_name(name, "leaf_paths")?;
                let parent = if level == 0 { None } else { Some(path[level - 1].as_str()) };
                match members[level].get(name.as_str()) {
                    Some(existing) if *existing != parent => {
                        return Err(Error::InconsistentPath {
                            level,
                            name: name.clone(),
                            first: existing.unwrap_or_default().to_string(),
                            second: parent.unwrap_or_default().to_string(),
                        });
                    }
                    Some(_) => {}
                    None => {
                        members[level].insert(name.as_str(), parent);
                    }
                }
            }
        }

        let class_names: Vec<Vec<String>> = members
            .iter()
            .map(|m| m.keys().map(|k| k.to_string()).collect())
            .collect();
        let name_index: Vec<HashMap<String, usize>> = class_names
            .iter()
            .map(|names| names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect())
            .collect();
        let mut parent_of = vec![Vec::new(); depth];
        for level in 1..depth {
            parent_of[level] = members[level]
                .values()
                .map(|p| name_index[level - 1][p.expect("non-root level has a parent")])
                .collect();
        }

        Ok(Self::assemble(level_names, class_names, parent_of, name_index))
    }

    /// Builds with the default seven level names.
    pub fn from_paths(leaf_paths: &[Vec<String>]) -> Result<Self> {
        let depth = leaf_paths.first().map(Vec::len).unwrap_or(DEFAULT_LEVEL_NAMES.len());
        let names = default_level_names(depth);
        Self::build(&names, leaf_paths)
    }

    fn assemble(
        level_names: Vec<String>,
        class_names: Vec<Vec<String>>,
        parent_of: Vec<Vec<usize>>,
        name_index: Vec<HashMap<String, usize>>,
    ) -> Self {
        let depth = level_names.len();
        let leaves = class_names[depth - 1].len();
        let mut leaf_ancestors = vec![Vec::new(); depth];
        leaf_ancestors[depth - 1] = (0..leaves).collect();
        for level in (0..depth - 1).rev() {
            leaf_ancestors[level] = leaf_ancestors[level + 1]
                .iter()
                .map(|&c| parent_of[level + 1][c])
                .collect();
        }
        Self {
            level_names,
            class_names,
            parent_of,
            leaf_ancestors,
            name_index,
        }
    }

    pub fn num_levels(&self) -> usize {
        self.level_names.len()
    }

    pub fn leaf_level(&self) -> usize {
        self.level_names.len() - 1
    }

    pub fn num_leaves(&self) -> usize {
        self.class_names[self.leaf_level()].len()
    }

    pub fn level_names(&self) -> &[String] {
        &self.level_names
    }

    pub fn level_name(&self, level: usize) -> Result<&str> {
        self.check_level(level)?;
        Ok(&self.level_names[level])
    }

    /// Resolves a level by name (case-insensitive).
    pub fn level_index(&self, name: &str) -> Option<usize> {
        self.level_names.iter().position(|n| n.eq_ignore_ascii_case(name))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.class_names.iter().map(Vec::len).collect()
    }

    pub fn num_classes(&self, level: usize) -> Result<usize> {
        self.check_level(level)?;
        Ok(self.class_names[level].len())
    }

    /// Number of nodes summed over all levels, i.e. the number of edges when
    /// each node is linked to its parent and the top level to an implicit root.
    pub fn edge_count(&self) -> usize {
        self.class_names.iter().map(Vec::len).sum()
    }

    pub fn class_names(&self, level: usize) -> Result<&[String]> {
        self.check_level(level)?;
        Ok(&self.class_names[level])
    }

    pub fn class_name(&self, level: usize, class: usize) -> Result<&str> {
        self.check_class(level, class)?;
        Ok(&self.class_names[level][class])
    }

    pub fn class_index(&self, level: usize, name: &str) -> Option<usize> {
        self.name_index.get(level)?.get(name).copied()
    }

    /// Parent map from `level` to `level - 1`; empty for the top level.
    pub fn parents(&self, level: usize) -> Result<&[usize]> {
        self.check_level(level)?;
        Ok(&self.parent_of[level])
    }

    /// The unique ancestor of `leaf` at `level`. Identity at the leaf level.
    pub fn ancestor(&self, leaf: usize, level: usize) -> Result<usize> {
        self.check_level(level)?;
        if leaf >= self.num_leaves() {
            return Err(Error::OutOfRange {
                what: "leaf",
                index: leaf,
                limit: self.num_leaves(),
            });
        }
        Ok(self.leaf_ancestors[level][leaf])
    }

    /// Ancestors of every leaf at `level`, indexed by leaf.
    pub fn leaf_ancestors(&self, level: usize) -> Result<&[usize]> {
        self.check_level(level)?;
        Ok(&self.leaf_ancestors[level])
    }

    /// Ancestor of an arbitrary class (`class` at `level`) at `target <= level`.
    pub fn class_ancestor(&self, level: usize, class: usize, target: usize) -> Result<usize> {
        self.check_class(level, class)?;
        if target > level {
            return Err(Error::LevelOrder {
                fine: level,
                coarse: target,
            });
        }
        let mut c = class;
        for l in (target + 1..=level).rev() {
            c = self.parent_of[l][c];
        }
        Ok(c)
    }

    /// The 0/1 matrix mapping classes at `fine` to their ancestors at `coarse`.
    pub fn marginalization_matrix(&self, fine: usize, coarse: usize) -> Result<MarginalizationMatrix> {
        if coarse >= fine {
            return Err(Error::LevelOrder { fine, coarse });
        }
        self.level_map(fine, coarse)
    }

    /// Like [`marginalization_matrix`](Self::marginalization_matrix) but also
    /// admits `coarse == fine`, which yields the identity map.
    pub fn level_map(&self, fine: usize, coarse: usize) -> Result<MarginalizationMatrix> {
        self.check_level(fine)?;
        self.check_level(coarse)?;
        if coarse > fine {
            return Err(Error::LevelOrder { fine, coarse });
        }
        let coarse_of = (0..self.class_names[fine].len())
            .map(|c| self.class_ancestor(fine, c, coarse))
            .collect::<Result<Vec<_>>>()?;
        Ok(MarginalizationMatrix {
            fine_level: fine,
            coarse_level: coarse,
            coarse_of,
            num_coarse: self.class_names[coarse].len(),
        })
    }

    /// Class names along the path of `leaf`, coarsest first.
    pub fn leaf_path(&self, leaf: usize) -> Result<Vec<&str>> {
        (0..self.num_levels())
            .map(|level| {
                let c = self.ancestor(leaf, level)?;
                Ok(self.class_names[level][c].as_str())
            })
            .collect()
    }

    /// All leaf paths, sorted lexicographically.
    pub fn leaf_paths(&self) -> Vec<Vec<String>> {
        let mut paths: Vec<Vec<String>> = (0..self.num_leaves())
            .map(|leaf| {
                self.leaf_path(leaf)
                    .expect("leaf in range")
                    .into_iter()
                    .map(str::to_string)
                    .collect()
            })
            .collect();
        paths.sort();
        paths
    }

    /// Sub-taxonomy containing only the selected leaves (and their ancestors).
    pub fn restrict(&self, keep_leaf: impl Fn(usize) -> bool) -> Result<Taxonomy> {
        let paths: Vec<Vec<String>> = (0..self.num_leaves())
            .filter(|&leaf| keep_leaf(leaf))
            .map(|leaf| {
                self.leaf_path(leaf)
                    .map(|p| p.into_iter().map(str::to_string).collect())
            })
            .collect::<Result<_>>()?;
        Taxonomy::build(&self.level_names, &paths)
    }

    pub fn to_text(&self) -> String {
        let mut out = self.level_names.join(",");
        out.push('\n');
        for path in self.leaf_paths() {
            let _ = writeln!(out, "{}", path.join(","));
        }
        out
    }

    pub fn from_text(text: &str, source_name: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
            .filter(|(_, l)| !l.trim().is_empty());
        let Some((header_line, header)) = lines.next() else {
            return Err(Error::EmptyInput(format!("{source_name}: empty taxonomy file")));
        };
        let level_names: Vec<String> = header.split(',').map(str::to_string).collect();
        if level_names.len() < 2 || level_names.iter().any(|n| n.is_empty()) {
            return Err(Error::parse(
                source_name,
                header_line,
                "header must name at least two non-empty levels",
            ));
        }
        let mut paths = Vec::new();
        for (line_no, line) in lines {
            let fields: Vec<String> = line.split(',').map(str::to_string).collect();
            if fields.len() != level_names.len() {
                return Err(Error::parse(
                    source_name,
                    line_no,
                    format!("expected {} fields, found {}", level_names.len(), fields.len()),
                ));
            }
            if fields.iter().any(|f| f.is_empty()) {
                return Err(Error::parse(source_name, line_no, "empty class name"));
            }
            paths.push(fields);
        }
        Taxonomy::build(&level_names, &paths)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level >= self.num_levels() {
            return Err(Error::OutOfRange {
                what: "level",
                index: level,
                limit: self.num_levels(),
            });
        }
        Ok(())
    }

    fn check_class(&self, level: usize, class: usize) -> Result<()> {
        self.check_level(level)?;
        let limit = self.class_names[level].len();
        if class >= limit {
            return Err(Error::OutOfRange {
                what: "class",
                index: class,
                limit,
            });
        }
        Ok(())
    }
}

pub fn default_level_names(depth: usize) -> Vec<String> {
    if depth == DEFAULT_LEVEL_NAMES.len() {
        DEFAULT_LEVEL_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (1..=depth).map(|i| format!("L{i}")).collect()
    }
}

fn validate_name(name: &str, field: &str) -> Result<()> {
    if name.is_empty() {
        return Err(Error::EmptyInput(format!("empty name in {field}")));
    }
    if name.contains([',', '\t', '\n', '\r']) {
        return Err(Error::config(field, format!("name {name:?} contains a separator character")));
    }
    Ok(())
}

/// Row-one-hot 0/1 matrix from classes at `fine_level` to classes at
/// `coarse_level`, stored sparsely as the column index of each row's 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarginalizationMatrix {
    fine_level: usize,
    coarse_level: usize,
    coarse_of: Vec<usize>,
    num_coarse: usize,
}

impl MarginalizationMatrix {
    pub fn fine_level(&self) -> usize {
        self.fine_level
    }

    pub fn coarse_level(&self) -> usize {
        self.coarse_level
    }

    pub fn rows(&self) -> usize {
        self.coarse_of.len()
    }

    pub fn cols(&self) -> usize {
        self.num_coarse
    }

    /// Column holding the 1 in `row`.
    pub fn coarse_of(&self, row: usize) -> usize {
        self.coarse_of[row]
    }

    pub fn mapping(&self) -> &[usize] {
        &self.coarse_of
    }

    pub fn is_identity(&self) -> bool {
        self.fine_level == self.coarse_level
    }

    pub fn entry(&self, row: usize, col: usize) -> u8 {
        u8::from(self.coarse_of[row] == col)
    }

    pub fn to_dense(&self) -> Vec<Vec<u8>> {
        (0..self.rows())
            .map(|r| (0..self.cols()).map(|c| self.entry(r, c)).collect())
            .collect()
    }

    /// Coarse-level distribution obtained by summing fine-level mass over
    /// each coarse class's descendants.
    pub fn marginalize(&self, probs: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.num_coarse];
        self.marginalize_into(probs, &mut out)?;
        Ok(out)
    }

    pub fn marginalize_into(&self, probs: &[f64], out: &mut [f64]) -> Result<()> {
        if probs.len() != self.rows() {
            return Err(Error::DimensionMismatch {
                what: "probabilities",
                expected: self.rows(),
                got: probs.len(),
            });
        }
        if out.len() != self.num_coarse {
            return Err(Error::DimensionMismatch {
                what: "marginal output",
                expected: self.num_coarse,
                got: out.len(),
            });
        }
        out.fill(0.0);
        for (&p, &c) in probs.iter().zip(&self.coarse_of) {
            out[c] += p;
        }
        Ok(())
    }

    /// Mass of `probs` under a single coarse class.
    pub fn mass_of(&self, probs: &[f64], coarse: usize) -> f64 {
        probs
            .iter()
            .zip(&self.coarse_of)
            .filter(|(_, &c)| c == coarse)
            .fold(0.0, |acc, (&p, _)| acc + p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Taxonomy {
        let paths = [["K", "P1", "S1"], ["K", "P1", "S2"], ["K", "P2", "S3"], ["K", "P2", "S4"]]
            .iter()
            .map(|p| p.iter().map(|s| s.to_string()).collect())
            .collect::<Vec<Vec<String>>>();
        Taxonomy::build(&["Kingdom", "Phylum", "Species"], &paths).unwrap()
    }

    /// Groups leaf paths by prefix without going through the index tables.
    fn brute_force_parents(paths: &[Vec<String>], level: usize) -> Vec<usize> {
        let mut fine: Vec<&String> = paths.iter().map(|p| &p[level]).collect();
        fine.sort();
        fine.dedup();
        let mut coarse: Vec<&String> = paths.iter().map(|p| &p[level - 1]).collect();
        coarse.sort();
        coarse.dedup();
        fine.iter()
            .map(|name| {
                let path = paths.iter().find(|p| &p[level] == *name).unwrap();
                coarse.iter().position(|c| **c == path[level - 1]).unwrap()
            })
            .collect()
    }

    #[test]
    fn toy_counts_and_parents() {
        let t = toy();
        assert_eq!(t.class_counts(), vec![1, 2, 4]);
        assert_eq!(t.parents(2).unwrap(), &[0, 0, 1, 1]);
        let paths = t.leaf_paths();
        assert_eq!(t.parents(2).unwrap(), brute_force_parents(&paths, 2).as_slice());
        assert_eq!(t.parents(1).unwrap(), brute_force_parents(&paths, 1).as_slice());
    }

    #[test]
    fn single_chain() {
        let path: Vec<String> = (0..7).map(|i| format!("n{i}")).collect();
        let t = Taxonomy::from_paths(&[path]).unwrap();
        assert_eq!(t.class_counts(), vec![1; 7]);
        assert_eq!(t.level_names()[6], "Species");
        let w = t.marginalization_matrix(6, 5).unwrap();
        assert_eq!(w.to_dense(), vec![vec![1]]);
    }

    #[test]
    fn ancestor_lookup() {
        let t = toy();
        let s3 = t.class_index(2, "S3").unwrap();
        let p2 = t.class_index(1, "P2").unwrap();
        assert_eq!(t.ancestor(s3, 1).unwrap(), p2);
        for leaf in 0..t.num_leaves() {
            assert_eq!(t.ancestor(leaf, t.leaf_level()).unwrap(), leaf);
        }
        assert!(matches!(t.ancestor(4, 1), Err(Error::OutOfRange { .. })));
        assert!(matches!(t.ancestor(0, 3), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn inconsistent_parent_rejected() {
        let paths = vec![
            vec!["K".to_string(), "P1".into(), "S1".into()],
            vec!["K".to_string(), "P2".into(), "S1".into()],
        ];
        let err = Taxonomy::build(&["a", "b", "c"], &paths).unwrap_err();
        assert!(matches!(err, Error::InconsistentPath { level: 2, .. }));
    }

    #[test]
    fn empty_and_ragged_input() {
        assert!(matches!(Taxonomy::build(&["a", "b"], &[]), Err(Error::EmptyInput(_))));
        let ragged = vec![vec!["a".to_string(), "b".into()], vec!["a".to_string()]];
        assert!(matches!(
            Taxonomy::build(&["x", "y"], &ragged),
            Err(Error::DimensionMismatch { .. })
        ));
        let blank = vec![vec!["a".to_string(), String::new()]];
        assert!(matches!(Taxonomy::build(&["x", "y"], &blank), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn matrix_level_order() {
        let t = toy();
        assert!(matches!(t.marginalization_matrix(1, 1), Err(Error::LevelOrder { .. })));
        assert!(matches!(t.marginalization_matrix(1, 2), Err(Error::LevelOrder { .. })));
        assert!(t.level_map(1, 1).unwrap().is_identity());
    }

    #[test]
    fn composition_on_toy() {
        let t = toy();
        let w31 = t.marginalization_matrix(2, 0).unwrap().to_dense();
        let w32 = t.marginalization_matrix(2, 1).unwrap().to_dense();
        let w21 = t.marginalization_matrix(1, 0).unwrap().to_dense();
        let product: Vec<Vec<u8>> = w32
            .iter()
            .map(|row| {
                (0..w21[0].len())
                    .map(|k| row.iter().zip(&w21).map(|(a, b)| a * b[k]).sum())
                    .collect()
            })
            .collect();
        assert_eq!(w31, product);
    }

    #[test]
    fn marginalize_examples() {
        let t = toy();
        let w = t.marginalization_matrix(2, 1).unwrap();
        assert_eq!(w.marginalize(&[0.25; 4]).unwrap(), vec![0.5, 0.5]);
        let s3 = t.class_index(2, "S3").unwrap();
        let mut onehot = vec![0.0; 4];
        onehot[s3] = 1.0;
        assert_eq!(w.marginalize(&onehot).unwrap(), vec![0.0, 1.0]);
        assert!(matches!(w.marginalize(&[0.5, 0.5]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn text_round_trip_and_errors() {
        let t = toy();
        let text = t.to_text();
        assert_eq!(text.lines().next().unwrap(), "Kingdom,Phylum,Species");
        let back = Taxonomy::from_text(&text, "mem").unwrap();
        assert_eq!(back, t);

        assert!(matches!(Taxonomy::from_text("", "mem"), Err(Error::EmptyInput(_))));
        assert!(matches!(
            Taxonomy::from_text("a,b,c\n", "mem"),
            Err(Error::EmptyInput(_))
        ));
        let bad = "a,b,c\nK,P1,S1\nK,P1\n";
        assert!(matches!(
            Taxonomy::from_text(bad, "mem"),
            Err(Error::Parse { line: 3, .. })
        ));
        let twice = "a,b,c\nK,P1,S1\nK,P2,S1\n";
        assert!(matches!(
            Taxonomy::from_text(twice, "mem"),
            Err(Error::InconsistentPath { .. })
        ));
    }

    #[test]
    fn class_ancestor_and_restrict() {
        let t = toy();
        let p2 = t.class_index(1, "P2").unwrap();
        assert_eq!(t.class_ancestor(1, p2, 0).unwrap(), 0);
        assert_eq!(t.class_ancestor(1, p2, 1).unwrap(), p2);
        assert!(matches!(t.class_ancestor(1, p2, 2), Err(Error::LevelOrder { .. })));

        let sub = t.restrict(|leaf| leaf != 0).unwrap();
        assert_eq!(sub.class_counts(), vec![1, 2, 3]);
        assert_eq!(sub.class_index(1, "P2"), t.class_index(1, "P2"));
    }
}
