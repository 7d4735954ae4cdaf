use serde::{Deserialize, Serialize};

use super::synth::{Dataset, Sample, SynthManifest};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Family,
    Genus,
    Species,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaxonNode {
    pub id: usize,
    pub name: String,
    pub level: Level,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Class index of a species leaf.
    pub species: Option<usize>,
}

/// Family -> genus -> species tree. Node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyTree {
    pub nodes: Vec<TaxonNode>,
}

impl TaxonomyTree {
    /// One family holding every genus of the manifest.
    pub fn from_manifest(manifest: &SynthManifest) -> Self {
        let mut nodes = vec![TaxonNode {
            id: 0,
            name: "family-0".into(),
            level: Level::Family,
            parent: None,
            children: Vec::new(),
            species: None,
        }];
        let genera = manifest
            .classes
            .iter()
            .map(|c| c.genus_id)
            .max()
            .map_or(0, |g| g + 1);
        for g in 0..genera {
            let id = nodes.len();
            nodes[0].children.push(id);
            nodes.push(TaxonNode {
                id,
                name: format!("genus-{g}"),
                level: Level::Genus,
                parent: Some(0),
                children: Vec::new(),
                species: None,
            });
        }
        for c in &manifest.classes {
            let id = nodes.len();
            let parent = 1 + c.genus_id;
            nodes[parent].children.push(id);
            nodes.push(TaxonNode {
                id,
                name: format!("species-{}", c.class_id),
                level: Level::Species,
                parent: Some(parent),
                children: Vec::new(),
                species: Some(c.class_id),
            });
        }
        Self { nodes }
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn node(&self, id: usize) -> &TaxonNode {
        &self.nodes[id]
    }

    pub fn genus_node(&self, genus: usize) -> usize {
        self.nodes[0].children[genus]
    }

    /// Species class indices below `id`.
    pub fn species_under(&self, id: usize) -> Vec<usize> {
        let n = &self.nodes[id];
        match n.species {
            Some(s) => vec![s],
            None => n
                .children
                .iter()
                .flat_map(|&c| self.species_under(c))
                .collect(),
        }
    }

    pub fn ancestor(&self, mut id: usize, level: Level) -> Option<usize> {
        loop {
            if self.nodes[id].level == level {
                return Some(id);
            }
            id = self.nodes[id].parent?;
        }
    }
}

/// Labels of a dataset derived at one internal node.
#[derive(Clone, Debug, PartialEq)]
pub struct Relabeled {
    pub node: usize,
    pub children: Vec<usize>,
    pub dataset: Dataset,
}

/// Keeps only images under `node` and labels each by the index of the child
/// group containing its species.
pub fn relabel_taxonomy(dataset: &Dataset, tree: &TaxonomyTree, node: usize) -> Result<Relabeled> {
    let n = tree
        .nodes
        .get(node)
        .ok_or_else(|| Error::contract(format!("unknown taxonomy node {node}")))?;
    if n.children.is_empty() {
        return Err(Error::contract(format!(
            "taxonomy node {} is a leaf",
            n.name
        )));
    }
    if n.children.len() < 2 {
        return Err(Error::contract(format!(
            "taxonomy node {} has a single child; nothing to separate",
            n.name
        )));
    }
    let group_of: Vec<(usize, Vec<usize>)> = n
        .children
        .iter()
        .enumerate()
        .map(|(i, &c)| (i, tree.species_under(c)))
        .collect();
    let relabel = |samples: &[Sample]| -> Vec<Sample> {
        samples
            .iter()
            .filter_map(|s| {
                group_of
                    .iter()
                    .find(|(_, sp)| sp.contains(&s.species))
                    .map(|(i, _)| Sample {
                        label: *i,
                        ..s.clone()
                    })
            })
            .collect()
    };
    Ok(Relabeled {
        node,
        children: n.children.clone(),
        dataset: Dataset {
            classes: n.children.len(),
            train: relabel(&dataset.train),
            test: relabel(&dataset.test),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synth_traits, SynthSpec};
    use std::collections::BTreeSet;

    fn fixture() -> (crate::data::synth::SynthTraits, TaxonomyTree) {
        let spec = SynthSpec {
            train_per_class: 2,
            test_per_class: 1,
            ..SynthSpec::synth8()
        };
        let s = generate_synth_traits(&spec, 4).unwrap();
        let t = TaxonomyTree::from_manifest(&s.manifest);
        (s, t)
    }

    #[test]
    fn siblings_share_a_genus_label() {
        let (s, t) = fixture();
        let r = relabel_taxonomy(&s.dataset, &t, t.root()).unwrap();
        let label_of = |species: usize| {
            r.dataset
                .train
                .iter()
                .find(|x| x.species == species)
                .unwrap()
                .label
        };
        assert_eq!(label_of(0), label_of(1));
        assert_ne!(label_of(1), label_of(2));
    }

    #[test]
    fn root_children_set_class_count() {
        let (s, t) = fixture();
        let r = relabel_taxonomy(&s.dataset, &t, t.root()).unwrap();
        assert_eq!(r.dataset.classes, t.node(t.root()).children.len());
        assert_eq!(r.dataset.classes, 4);
    }

    #[test]
    fn leaf_is_rejected() {
        let (s, t) = fixture();
        let leaf = t
            .nodes
            .iter()
            .find(|n| n.level == Level::Species)
            .unwrap()
            .id;
        assert!(relabel_taxonomy(&s.dataset, &t, leaf).is_err());
    }

    #[test]
    fn genus_filter_equals_species_subset() {
        let (s, t) = fixture();
        let genus_level = relabel_taxonomy(&s.dataset, &t, t.root()).unwrap();
        for g in 0..4 {
            let by_filter: BTreeSet<_> = genus_level
                .dataset
                .train
                .iter()
                .chain(&genus_level.dataset.test)
                .filter(|x| x.label == g)
                .map(|x| x.id.clone())
                .collect();
            let species_level = relabel_taxonomy(&s.dataset, &t, t.genus_node(g)).unwrap();
            let direct: BTreeSet<_> = species_level
                .dataset
                .train
                .iter()
                .chain(&species_level.dataset.test)
                .map(|x| x.id.clone())
                .collect();
            assert_eq!(by_filter, direct);
        }
    }
}
