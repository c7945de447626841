use serde::{Deserialize, Serialize};

/// Observed traffic modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Bike,
    Taxi,
    Bus,
    Speed,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Bike, Modality::Taxi, Modality::Bus, Modality::Speed];

    /// Inflow + outflow for demand modes, a single average for speed.
    pub fn channels(self) -> usize {
        match self {
            Modality::Speed => 1,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Bike => "bike",
            Modality::Taxi => "taxi",
            Modality::Bus => "bus",
            Modality::Speed => "speed",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn total_channels() -> usize {
        Self::ALL.iter().map(|m| m.channels()).sum()
    }
}

/// Latent concept labels in their fixed causal order.
pub const CONCEPT_LABELS: [&str; 5] = ["poi", "bike", "taxi", "bus", "v"];

/// Which latent layout the model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptLayout {
    /// One latent slot per concept: poi, bike, taxi, bus, v.
    Disentangled,
    /// A single latent slot that explains every modality.
    Entangled,
}

/// Ordered concepts with their observation wiring. Slot `i` along the
/// concept axis of every latent tensor is concept `i` here.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSet {
    labels: Vec<&'static str>,
    posterior_inputs: Vec<Vec<Modality>>,
    generator_slots: [usize; 4],
}

impl ConceptSet {
    pub fn new(layout: ConceptLayout) -> Self {
        match layout {
            ConceptLayout::Disentangled => ConceptSet {
                labels: CONCEPT_LABELS.to_vec(),
                // The attraction factor has no observation of its own; it is
                // inferred from the total regional activity.
                posterior_inputs: vec![
                    Modality::ALL.to_vec(),
                    vec![Modality::Bike],
                    vec![Modality::Taxi],
                    vec![Modality::Bus],
                    vec![Modality::Speed],
                ],
                generator_slots: [1, 2, 3, 4],
            },
            ConceptLayout::Entangled => ConceptSet {
                labels: vec!["entangled"],
                posterior_inputs: vec![Modality::ALL.to_vec()],
                generator_slots: [0, 0, 0, 0],
            },
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[&'static str] {
        &self.labels
    }

    /// Modalities concatenated into concept `i`'s posterior input.
    pub fn posterior_inputs(&self, concept: usize) -> &[Modality] {
        &self.posterior_inputs[concept]
    }

    pub fn posterior_input_width(&self, concept: usize) -> usize {
        self.posterior_inputs[concept].iter().map(|m| m.channels()).sum()
    }

    /// Latent slot read by a modality's generator head.
    pub fn generator_slot(&self, modality: Modality) -> usize {
        self.generator_slots[modality.index()]
    }
}
