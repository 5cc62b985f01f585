//! A dataset directory: the multi-view network, entity attributes, and the
//! consultations with their dialogues and (optional) labels.
//!
//! ```text
//! dir/triples.tsv        view  timestamp  head_kind  head_id  relation  tail_kind  tail_id
//! dir/attributes.tsv     entity_kind  entity_id  name=value[,name=value…]
//! dir/consultations.tsv  consultation_id  patient_id  doctor_id  disease_id  hospital_id
//! dir/dialogues.tsv      consultation_id  speaker  timestamp  text
//! dir/labels.tsv         consultation_id  label
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::dialogue::{dialogue_lines, parse_dialogues, parse_labels, ConsultationRecord};
use crate::error::{Error, Result};
use crate::graph::{
    parse_attributes, parse_triples, write_lines, AttributeTable, EntityKind, EntityRef,
    KnowledgeNetwork, View,
};

pub const TRIPLES_FILE: &str = "triples.tsv";
pub const ATTRIBUTES_FILE: &str = "attributes.tsv";
pub const CONSULTATIONS_FILE: &str = "consultations.tsv";
pub const DIALOGUES_FILE: &str = "dialogues.tsv";
pub const LABELS_FILE: &str = "labels.tsv";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub network: KnowledgeNetwork,
    pub attributes: AttributeTable,
    /// Sorted by id.
    pub consultations: Vec<ConsultationRecord>,
}

impl Dataset {
    pub fn online(&self) -> KnowledgeNetwork {
        self.network.filter_view(View::Online)
    }

    pub fn offline(&self) -> KnowledgeNetwork {
        self.network.filter_view(View::Offline)
    }

    pub fn labeled(&self) -> bool {
        self.consultations.iter().all(|c| c.label.is_some())
    }

    /// Same consultations and attributes over an empty network.
    pub fn without_triples(&self) -> Dataset {
        Dataset {
            network: KnowledgeNetwork::default(),
            attributes: self.attributes.clone(),
            consultations: self.consultations.clone(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let network = parse_triples(&dir.join(TRIPLES_FILE))?;
        let attr_path = dir.join(ATTRIBUTES_FILE);
        let attributes = if attr_path.exists() {
            parse_attributes(&attr_path)?
        } else {
            AttributeTable::default()
        };
        let mut dialogues = parse_dialogues(&dir.join(DIALOGUES_FILE))?;
        let labels_path = dir.join(LABELS_FILE);
        let labels = if labels_path.exists() {
            Some(parse_labels(&labels_path)?)
        } else {
            None
        };

        let path = dir.join(CONSULTATIONS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut consultations = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(Error::parse(&path, i + 1, format!("expected 5 fields, found {}", f.len())));
            }
            let ent = |kind, id: &str| {
                EntityRef::new(kind, id).map_err(|e| Error::parse(&path, i + 1, e.to_string()))
            };
            let id = f[0].to_string();
            if !seen.insert(id.clone()) {
                return Err(Error::parse(&path, i + 1, format!("duplicate consultation `{id}`")));
            }
            let label = match &labels {
                Some(l) => Some(*l.get(&id).ok_or_else(|| {
                    Error::Schema(format!("consultation `{id}` has no label in {LABELS_FILE}"))
                })?),
                None => None,
            };
            consultations.push(ConsultationRecord {
                patient: ent(EntityKind::Patient, f[1])?,
                doctor: ent(EntityKind::Doctor, f[2])?,
                disease: ent(EntityKind::Disease, f[3])?,
                hospital: ent(EntityKind::Hospital, f[4])?,
                sentences: dialogues.remove(&id).unwrap_or_default(),
                label,
                id,
            });
        }
        if let Some(orphan) = dialogues.keys().next() {
            return Err(Error::Schema(format!(
                "dialogue for unknown consultation `{orphan}`"
            )));
        }
        consultations.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(Dataset {
            network,
            attributes,
            consultations,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_lines(&dir.join(TRIPLES_FILE), self.network.to_tsv().lines().map(String::from))?;
        write_lines(&dir.join(ATTRIBUTES_FILE), self.attributes.to_tsv().lines().map(String::from))?;
        write_lines(
            &dir.join(CONSULTATIONS_FILE),
            self.consultations.iter().map(|c| {
                format!(
                    "{}\t{}\t{}\t{}\t{}",
                    c.id, c.patient.id, c.doctor.id, c.disease.id, c.hospital.id
                )
            }),
        )?;
        write_lines(&dir.join(DIALOGUES_FILE), dialogue_lines(&self.consultations))?;
        if self.labeled() {
            write_lines(
                &dir.join(LABELS_FILE),
                self.consultations
                    .iter()
                    .map(|c| format!("{}\t{}", c.id, c.label.unwrap_or(0))),
            )?;
        }
        Ok(())
    }

    /// Every entity mentioned by the network, the attribute table, or a
    /// consultation.
    pub fn entities(&self) -> Vec<EntityRef> {
        let mut set: std::collections::BTreeSet<EntityRef> = self.network.entities().clone();
        set.extend(self.attributes.entries.keys().cloned());
        for c in &self.consultations {
            set.insert(c.patient.clone());
            set.insert(c.doctor.clone());
            set.insert(c.disease.clone());
            set.insert(c.hospital.clone());
        }
        set.into_iter().collect()
    }

    pub fn label_counts(&self) -> BTreeMap<u8, usize> {
        let mut m = BTreeMap::new();
        for c in &self.consultations {
            if let Some(l) = c.label {
                *m.entry(l).or_insert(0) += 1;
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialogue::{Sentence, Speaker};
    use crate::graph::{Relation, Triple};

    fn sample() -> Dataset {
        let p = EntityRef::patient("p1");
        let d = EntityRef::doctor("d1");
        let net = KnowledgeNetwork::from_triples([
            Triple::new(View::Online, 10, p.clone(), Relation::PatDoc, d.clone()).unwrap(),
            Triple::new(View::Offline, 20, d.clone(), Relation::DocHosp, EntityRef::hospital("h1")).unwrap(),
        ]);
        let mut attributes = AttributeTable::default();
        attributes
            .insert(p.clone(), vec![("age".into(), "30s".into())])
            .unwrap();
        Dataset {
            network: net,
            attributes,
            consultations: vec![ConsultationRecord {
                id: "c1".into(),
                patient: p,
                doctor: d,
                disease: EntityRef::disease("x"),
                hospital: EntityRef::hospital("h1"),
                sentences: vec![
                    Sentence {
                        speaker: Speaker::Patient,
                        timestamp: 100,
                        text: "hello\tthere\nfriend".into(),
                    },
                    Sentence {
                        speaker: Speaker::Doctor,
                        timestamp: 160,
                        text: "hi".into(),
                    },
                ],
                label: Some(1),
            }],
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample();
        ds.write(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.entities().len(), 4);
    }

    #[test]
    fn missing_labels_means_unlabeled() {
        let dir = tempfile::tempdir().unwrap();
        sample().write(dir.path()).unwrap();
        fs::remove_file(dir.path().join(LABELS_FILE)).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert!(back.consultations.iter().all(|c| c.label.is_none()));
    }

    #[test]
    fn orphan_dialogue_rejected() {
        let dir = tempfile::tempdir().unwrap();
        sample().write(dir.path()).unwrap();
        fs::write(dir.path().join(CONSULTATIONS_FILE), "").unwrap();
        assert!(Dataset::load(dir.path()).is_err());
    }
}
