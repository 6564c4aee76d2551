//! The four-level forgery-attribute hierarchy.
//!
//! Level 1 separates fully-synthesized from partially-manipulated forgeries
//! and each deeper level refines the method family until level 4 names the
//! concrete forgery method. "real" exists only at level 4 and has no parent;
//! every other class at levels 2..4 links to exactly one class one level up.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LEVELS: usize = 4;
pub const REAL_NAME: &str = "real";

/// Validated 4-level class hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct TaxonomyTree {
    /// Class names per level, outermost index is level-1..level-4.
    levels: [Vec<String>; LEVELS],
    /// parent_of[b][j] = index at level b of the parent of class j at level
    /// b+1 (b in 0..3); None only for "real".
    parent_of: [Vec<Option<usize>>; LEVELS - 1],
    real_index: usize,
}

/// Root-to-leaf class indices for one level-4 class. Entries at levels 1-3
/// are absent when the leaf is "real".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelPath {
    pub leaf: usize,
    pub per_level: [Option<usize>; LEVELS],
}

impl TaxonomyTree {
    /// Parses and validates the structured-text config format:
    /// `levelN = name, name, ...` lines plus `parent = child -> parent`
    /// pairs. `#` starts a comment.
    pub fn parse(document: &str) -> Result<Self> {
        let mut levels: [Vec<String>; LEVELS] = Default::default();
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in document.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Taxonomy(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if let Some(ln) = key.strip_prefix("level") {
                let level: usize = ln
                    .parse()
                    .map_err(|_| Error::Taxonomy(format!("bad level key {key:?}")))?;
                if !(1..=LEVELS).contains(&level) {
                    return Err(Error::Taxonomy(format!("level {level} out of range 1..{LEVELS}")));
                }
                for name in value.split(',') {
                    let name = name.trim();
                    if name.is_empty() {
                        return Err(Error::Taxonomy(format!("empty class name at level {level}")));
                    }
                    levels[level - 1].push(name.to_string());
                }
            } else if key == "parent" {
                let (child, parent) = value.split_once("->").ok_or_else(|| {
                    Error::Taxonomy(format!("line {}: expected child -> parent", lineno + 1))
                })?;
                pairs.push((child.trim().to_string(), parent.trim().to_string()));
            } else {
                return Err(Error::Taxonomy(format!("unknown key {key:?}")));
            }
        }
        Self::build(levels, &pairs)
    }

    /// Assembles a tree from per-level name lists and child->parent pairs,
    /// enforcing every structural invariant.
    pub fn build(levels: [Vec<String>; LEVELS], pairs: &[(String, String)]) -> Result<Self> {
        for (li, names) in levels.iter().enumerate() {
            if names.is_empty() {
                return Err(Error::Taxonomy(format!("level {} has no classes", li + 1)));
            }
            for (i, a) in names.iter().enumerate() {
                if names[..i].contains(a) {
                    return Err(Error::Taxonomy(format!(
                        "duplicate name {a:?} at level {}",
                        li + 1
                    )));
                }
            }
        }
        for li in 0..LEVELS - 1 {
            if levels[li].len() > levels[li + 1].len() {
                return Err(Error::Taxonomy(format!(
                    "level {} has {} classes but level {} has {}; cardinalities must not shrink",
                    li + 1,
                    levels[li].len(),
                    li + 2,
                    levels[li + 1].len()
                )));
            }
        }
        for li in 0..LEVELS - 1 {
            if levels[li].iter().any(|n| n == REAL_NAME) {
                return Err(Error::Taxonomy(format!(
                    "{REAL_NAME:?} declared at level {}, it may only exist at level {LEVELS}",
                    li + 1
                )));
            }
        }
        let real_index = levels[LEVELS - 1]
            .iter()
            .position(|n| n == REAL_NAME)
            .ok_or_else(|| Error::Taxonomy(format!("{REAL_NAME:?} missing from level {LEVELS}")))?;

        let mut parent_of: [Vec<Option<usize>>; LEVELS - 1] =
            std::array::from_fn(|b| vec![None; levels[b + 1].len()]);
        for (child, parent) in pairs {
            // A pair applies at the unique level where the child sits one
            // level below the parent; same names may repeat across levels.
            let mut hits = Vec::new();
            for b in 0..LEVELS - 1 {
                let c = levels[b + 1].iter().position(|n| n == child);
                let p = levels[b].iter().position(|n| n == parent);
                if let (Some(c), Some(p)) = (c, p) {
                    hits.push((b, c, p));
                }
            }
            match hits.len() {
                0 => {
                    return Err(Error::Taxonomy(format!(
                        "parent pair {child:?} -> {parent:?} matches no adjacent level pair"
                    )))
                }
                1 => {
                    let (b, c, p) = hits[0];
                    if child == REAL_NAME {
                        return Err(Error::Taxonomy(format!(
                            "{REAL_NAME:?} must not have a parent"
                        )));
                    }
                    if parent_of[b][c].is_some() {
                        return Err(Error::Taxonomy(format!(
                            "class {child:?} at level {} has more than one parent",
                            b + 2
                        )));
                    }
                    parent_of[b][c] = Some(p);
                }
                _ => {
                    return Err(Error::Taxonomy(format!(
                        "parent pair {child:?} -> {parent:?} is ambiguous across levels"
                    )))
                }
            }
        }
        for b in 0..LEVELS - 1 {
            for (j, p) in parent_of[b].iter().enumerate() {
                let is_real = b + 2 == LEVELS && j == real_index;
                if p.is_none() && !is_real {
                    return Err(Error::Taxonomy(format!(
                        "class {:?} at level {} has no parent",
                        levels[b + 1][j],
                        b + 2
                    )));
                }
                if p.is_some() && is_real {
                    return Err(Error::Taxonomy(format!("{REAL_NAME:?} must not have a parent")));
                }
            }
        }
        Ok(TaxonomyTree {
            levels,
            parent_of,
            real_index,
        })
    }

    /// Canonical config serialization; parsing it back is the identity.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        for (li, names) in self.levels.iter().enumerate() {
            let _ = writeln!(out, "level{} = {}", li + 1, names.join(", "));
        }
        for b in 0..LEVELS - 1 {
            for (j, p) in self.parent_of[b].iter().enumerate() {
                if let Some(p) = p {
                    let _ = writeln!(out, "parent = {} -> {}", self.levels[b + 1][j], self.levels[b][*p]);
                }
            }
        }
        out
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_config_string().as_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn level_names(&self, level: usize) -> &[String] {
        &self.levels[level - 1]
    }

    /// Class count at a 1-based level.
    pub fn cardinality(&self, level: usize) -> usize {
        self.levels[level - 1].len()
    }

    pub fn cardinalities(&self) -> [usize; LEVELS] {
        std::array::from_fn(|i| self.levels[i].len())
    }

    pub fn real_index(&self) -> usize {
        self.real_index
    }

    pub fn leaf_count(&self) -> usize {
        self.levels[LEVELS - 1].len()
    }

    pub fn leaf_name(&self, leaf: usize) -> &str {
        &self.levels[LEVELS - 1][leaf]
    }

    pub fn leaf_index(&self, name: &str) -> Result<usize> {
        self.levels[LEVELS - 1]
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Taxonomy(format!("unknown leaf {name:?}")))
    }

    /// Forgery leaves in declaration order (everything but "real").
    pub fn forgery_leaves(&self) -> Vec<usize> {
        (0..self.leaf_count()).filter(|&i| i != self.real_index).collect()
    }

    /// Parent index at `level - 1` of class `index` at 1-based `level`.
    pub fn parent(&self, level: usize, index: usize) -> Option<usize> {
        if !(2..=LEVELS).contains(&level) {
            return None;
        }
        self.parent_of[level - 2][index]
    }

    /// Root-to-leaf path of a level-4 class.
    pub fn path_of(&self, leaf: usize) -> Result<LabelPath> {
        if leaf >= self.leaf_count() {
            return Err(Error::Taxonomy(format!(
                "leaf index {leaf} out of range {}",
                self.leaf_count()
            )));
        }
        let mut per_level = [None; LEVELS];
        per_level[LEVELS - 1] = Some(leaf);
        if leaf != self.real_index {
            let mut child = leaf;
            for level in (2..=LEVELS).rev() {
                let parent = self.parent(level, child).ok_or_else(|| {
                    Error::Taxonomy(format!("broken parent chain at level {level}"))
                })?;
                per_level[level - 2] = Some(parent);
                child = parent;
            }
        }
        Ok(LabelPath { leaf, per_level })
    }

    /// Child -> parent index map used by Eq.-style probability broadcasting;
    /// None marks the "real" slot at level 4.
    pub fn parent_map(&self, level: usize) -> Result<Vec<Option<usize>>> {
        if !(2..=LEVELS).contains(&level) {
            return Err(Error::Taxonomy(format!(
                "level {level} has no parent level"
            )));
        }
        Ok(self.parent_of[level - 2].clone())
    }

    /// Repeats each parent-class probability onto all its children at
    /// `level`; the "real" slot receives 0 because the hierarchy is defined
    /// over forgeries only.
    pub fn broadcast_parent_probs(&self, level: usize, parent_probs: &Tensor) -> Result<Tensor> {
        let map = self.parent_map(level)?;
        if parent_probs.numel() != self.cardinality(level - 1) {
            return Err(Error::ShapeMismatch {
                op: "broadcast_parent_probs",
                detail: format!(
                    "probs have {} entries, level {} has {} classes",
                    parent_probs.numel(),
                    level - 1,
                    self.cardinality(level - 1)
                ),
            });
        }
        let sum: f64 = parent_probs.data().iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Numeric(format!(
                "parent probabilities sum to {sum}, expected 1"
            )));
        }
        crate::ops::gather_map(parent_probs, &map)
    }
}

/// Paper-shaped 2/4/6/14 hierarchy used by tests and for compatibility runs.
pub fn paper_taxonomy_config() -> String {
    "\
level1 = fully-synthesized, partial-manipulated
level2 = diffusion, gan, cnn-based, image-editing
level3 = unconditional-diffusion, conditional-diffusion, unconditional-gan, conditional-gan, cnn-partial, editing-process
level4 = real, ddpm, ddim, glide, latent-diffusion, stylegan2-ada, stylegan3, stargan-v2, hisd, stgan, faceshifter, splicing, inpainting, copy-move-edit
parent = diffusion -> fully-synthesized
parent = gan -> fully-synthesized
parent = cnn-based -> partial-manipulated
parent = image-editing -> partial-manipulated
parent = unconditional-diffusion -> diffusion
parent = conditional-diffusion -> diffusion
parent = unconditional-gan -> gan
parent = conditional-gan -> gan
parent = cnn-partial -> cnn-based
parent = editing-process -> image-editing
parent = ddpm -> unconditional-diffusion
parent = ddim -> unconditional-diffusion
parent = glide -> conditional-diffusion
parent = latent-diffusion -> conditional-diffusion
parent = stylegan2-ada -> unconditional-gan
parent = stylegan3 -> unconditional-gan
parent = stargan-v2 -> conditional-gan
parent = hisd -> conditional-gan
parent = stgan -> cnn-partial
parent = faceshifter -> cnn-partial
parent = splicing -> editing-process
parent = inpainting -> editing-process
parent = copy-move-edit -> editing-process
"
    .to_string()
}

/// Shipped 2/4/4/7 hierarchy whose six forgery leaves map onto the
/// procedural generators.
pub fn mini_taxonomy_config() -> String {
    "\
level1 = fully-synthesized, partial-manipulated
level2 = texture-synthesis, pattern-synthesis, content-transfer, content-removal
level3 = stochastic-texture, periodic-pattern, region-transfer, region-edit
level4 = real, synth-texture-a, synth-texture-b, splice, copy-move, inpaint, retouch-blur
parent = texture-synthesis -> fully-synthesized
parent = pattern-synthesis -> fully-synthesized
parent = content-transfer -> partial-manipulated
parent = content-removal -> partial-manipulated
parent = stochastic-texture -> texture-synthesis
parent = periodic-pattern -> pattern-synthesis
parent = region-transfer -> content-transfer
parent = region-edit -> content-removal
parent = synth-texture-a -> stochastic-texture
parent = synth-texture-b -> periodic-pattern
parent = splice -> region-transfer
parent = copy-move -> region-transfer
parent = inpaint -> region-edit
parent = retouch-blur -> region-edit
"
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_config_is_a_valid_2_4_6_14_tree() {
        let tree = TaxonomyTree::parse(&paper_taxonomy_config()).unwrap();
        assert_eq!(tree.cardinalities(), [2, 4, 6, 14]);
        assert_eq!(tree.leaf_name(tree.real_index()), REAL_NAME);
    }

    #[test]
    fn mini_config_is_a_valid_2_4_4_7_tree() {
        let tree = TaxonomyTree::parse(&mini_taxonomy_config()).unwrap();
        assert_eq!(tree.cardinalities(), [2, 4, 4, 7]);
    }

    #[test]
    fn missing_parent_is_reported_with_the_class_name() {
        let doc = "\
level1 = a, b
level2 = c, d
level3 = e, f
level4 = real, g, h
parent = c -> a
parent = d -> b
parent = e -> c
parent = g -> e
parent = h -> f
";
        // f at level 3 has no parent line.
        let err = TaxonomyTree::parse(doc).unwrap_err().to_string();
        assert!(err.contains("\"f\"") && err.contains("level 3"), "{err}");
    }

    #[test]
    fn structural_defects_are_rejected() {
        // real above level 4
        let doc = "level1 = real, b\nlevel2 = c, d\nlevel3 = e, f\nlevel4 = real, g, h\n";
        let err = TaxonomyTree::parse(doc).unwrap_err().to_string();
        assert!(err.contains("level 1"), "{err}");

        // duplicate name within a level
        let doc = "level1 = a, a\nlevel2 = c, d\nlevel3 = e, f\nlevel4 = real, g, h\n";
        let err = TaxonomyTree::parse(doc).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");

        // parent pair pointing nowhere
        let doc = "\
level1 = a, b
level2 = c, d
level3 = e, f
level4 = real, g, h
parent = c -> z
";
        let err = TaxonomyTree::parse(doc).unwrap_err().to_string();
        assert!(err.contains("matches no"), "{err}");

        // shrinking cardinality
        let doc = "level1 = a, b, c\nlevel2 = d, e\nlevel3 = f, g\nlevel4 = real, h\n";
        let err = TaxonomyTree::parse(doc).unwrap_err().to_string();
        assert!(err.contains("must not shrink"), "{err}");
    }

    #[test]
    fn ddpm_path_matches_the_published_hierarchy() {
        let tree = TaxonomyTree::parse(&paper_taxonomy_config()).unwrap();
        let leaf = tree.leaf_index("ddpm").unwrap();
        let path = tree.path_of(leaf).unwrap();
        let names: Vec<&str> = path
            .per_level
            .iter()
            .enumerate()
            .map(|(li, e)| tree.level_names(li + 1)[e.unwrap()].as_str())
            .collect();
        assert_eq!(
            names,
            ["fully-synthesized", "diffusion", "unconditional-diffusion", "ddpm"]
        );
    }

    #[test]
    fn real_path_has_no_coarse_entries() {
        let tree = TaxonomyTree::parse(&mini_taxonomy_config()).unwrap();
        let path = tree.path_of(tree.real_index()).unwrap();
        assert_eq!(path.per_level[..3], [None, None, None]);
        assert_eq!(path.per_level[3], Some(tree.real_index()));
    }

    #[test]
    fn splice_path_reads_back_from_the_mini_config() {
        let tree = TaxonomyTree::parse(&mini_taxonomy_config()).unwrap();
        let leaf = tree.leaf_index("splice").unwrap();
        let path = tree.path_of(leaf).unwrap();
        let names: Vec<&str> = path
            .per_level
            .iter()
            .enumerate()
            .map(|(li, e)| tree.level_names(li + 1)[e.unwrap()].as_str())
            .collect();
        assert_eq!(
            names,
            ["partial-manipulated", "content-transfer", "region-transfer", "splice"]
        );
    }

    #[test]
    fn paths_are_consistent_with_parent_links() {
        for cfg in [paper_taxonomy_config(), mini_taxonomy_config()] {
            let tree = TaxonomyTree::parse(&cfg).unwrap();
            for leaf in 0..tree.leaf_count() {
                let path = tree.path_of(leaf).unwrap();
                for level in 2..=LEVELS {
                    if let Some(child) = path.per_level[level - 1] {
                        assert_eq!(tree.parent(level, child), path.per_level[level - 2]);
                    }
                }
            }
        }
    }

    #[test]
    fn broadcast_repeats_parent_probability_over_children() {
        let tree = TaxonomyTree::parse(&paper_taxonomy_config()).unwrap();
        // Children ddpm and ddim both receive p(unconditional-diffusion).
        let k3 = tree.cardinality(3);
        let ud = tree.level_names(3).iter().position(|n| n == "unconditional-diffusion").unwrap();
        let mut probs = vec![0.07; k3];
        probs[ud] = 1.0 - 0.07 * (k3 - 1) as f64;
        let out = tree
            .broadcast_parent_probs(4, &Tensor::from_vec(probs.clone()))
            .unwrap();
        let ddpm = tree.leaf_index("ddpm").unwrap();
        let ddim = tree.leaf_index("ddim").unwrap();
        assert_eq!(out.data()[ddpm], probs[ud]);
        assert_eq!(out.data()[ddim], probs[ud]);
        assert_eq!(out.data()[tree.real_index()], 0.0);
    }

    #[test]
    fn broadcast_direct_index_mapping_case() {
        // parents [0.8, 0.2], children (a,b) -> parent0 and (c) -> parent1.
        let doc = "\
level1 = p0, p1
level2 = a, b, c
level3 = a3, b3, c3
level4 = real, a4, b4, c4
parent = a -> p0
parent = b -> p0
parent = c -> p1
parent = a3 -> a
parent = b3 -> b
parent = c3 -> c
parent = a4 -> a3
parent = b4 -> b3
parent = c4 -> c3
";
        let tree = TaxonomyTree::parse(doc).unwrap();
        let out = tree
            .broadcast_parent_probs(2, &Tensor::from_vec(vec![0.8, 0.2]))
            .unwrap();
        assert_eq!(out.data(), &[0.8, 0.8, 0.2]);
    }

    #[test]
    fn broadcast_uniform_parent_gives_uniform_children() {
        let tree = TaxonomyTree::parse(&mini_taxonomy_config()).unwrap();
        let k2 = tree.cardinality(2);
        let out = tree
            .broadcast_parent_probs(3, &Tensor::from_vec(vec![1.0 / k2 as f64; k2]))
            .unwrap();
        for &v in out.data() {
            assert!((v - 1.0 / k2 as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn broadcast_preserves_mass_per_parent() {
        let tree = TaxonomyTree::parse(&paper_taxonomy_config()).unwrap();
        for level in 2..=LEVELS {
            let k_parent = tree.cardinality(level - 1);
            let probs: Vec<f64> = (0..k_parent).map(|i| (i + 1) as f64).collect();
            let total: f64 = probs.iter().sum();
            let probs: Vec<f64> = probs.into_iter().map(|p| p / total).collect();
            let out = tree
                .broadcast_parent_probs(level, &Tensor::from_vec(probs.clone()))
                .unwrap();
            for (p_idx, &p) in probs.iter().enumerate() {
                let children: Vec<usize> = (0..tree.cardinality(level))
                    .filter(|&j| tree.parent(level, j) == Some(p_idx))
                    .collect();
                let mass: f64 = children.iter().map(|&j| out.data()[j]).sum();
                assert!((mass - p * children.len() as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn broadcast_rejects_level_1_and_bad_mass() {
        let tree = TaxonomyTree::parse(&mini_taxonomy_config()).unwrap();
        assert!(tree.broadcast_parent_probs(1, &Tensor::from_vec(vec![1.0])).is_err());
        assert!(tree
            .broadcast_parent_probs(2, &Tensor::from_vec(vec![0.9, 0.3]))
            .is_err());
    }

    #[test]
    fn serialization_round_trip_is_a_fixed_point() {
        for cfg in [paper_taxonomy_config(), mini_taxonomy_config()] {
            let tree = TaxonomyTree::parse(&cfg).unwrap();
            let canon = tree.to_config_string();
            let reparsed = TaxonomyTree::parse(&canon).unwrap();
            assert_eq!(reparsed, tree);
            assert_eq!(reparsed.to_config_string(), canon);
            assert_eq!(reparsed.digest(), tree.digest());
        }
    }

    #[test]
    fn names_may_repeat_across_levels() {
        let doc = "\
level1 = synth, edit
level2 = tex, edit2
level3 = tex3, edit3
level4 = real, leaf-a, leaf-b
parent = tex -> synth
parent = edit2 -> edit
parent = tex3 -> tex
parent = edit3 -> edit2
parent = leaf-a -> tex3
parent = leaf-b -> edit3
";
        assert!(TaxonomyTree::parse(doc).is_ok());
    }
}
