//! Gradient conflict correction between the base loss and the auxiliary
//! review + summary losses.

use crate::error::{Error, Result};
use crate::matrix::{dot, norm};
use crate::nn::LayerSpan;

const NORM_EPS: f64 = 1e-12;

/// Cosine of the angle between `a` and `b`; 0 when either is (near) zero.
pub fn cos_angle(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na < NORM_EPS || nb < NORM_EPS {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradPair {
    pub g_ltr: Vec<f64>,
    pub g_aux: Vec<f64>,
    pub layer_spans: Vec<LayerSpan>,
}

impl GradPair {
    pub fn new(g_ltr: Vec<f64>, g_aux: Vec<f64>, layer_spans: Vec<LayerSpan>) -> Result<Self> {
        if g_ltr.len() != g_aux.len() {
            return Err(Error::dim("GradPair", g_ltr.len(), g_aux.len()));
        }
        let mut next = 0;
        for s in &layer_spans {
            if s.start != next {
                return Err(Error::Parameter(format!(
                    "layer span {} starts at {} but previous span ends at {next}",
                    s.name, s.start
                )));
            }
            next += s.len;
        }
        if next != g_ltr.len() {
            return Err(Error::Parameter(format!(
                "layer spans cover {next} of {} parameters",
                g_ltr.len()
            )));
        }
        Ok(Self {
            g_ltr,
            g_aux,
            layer_spans,
        })
    }

    /// A pair treated as a single layer.
    pub fn whole(g_ltr: Vec<f64>, g_aux: Vec<f64>) -> Result<Self> {
        let spans = vec![LayerSpan {
            name: "all".into(),
            start: 0,
            len: g_ltr.len(),
        }];
        Self::new(g_ltr, g_aux, spans)
    }
}

/// How the auxiliary gradient is reduced along the base gradient on conflict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProjectionRule {
    /// `g_aux - (g_aux . g_ltr / |g_ltr|^2) g_ltr`: removes the opposing component.
    #[default]
    Orthogonal,
    /// `g_aux - (cos(g_aux, g_ltr) / |g_ltr|^2) g_ltr`, kept for comparison only.
    LiteralCosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// Combined update direction.
    pub g_rl: Vec<f64>,
    /// Auxiliary gradient after correction (unchanged when not conflicted).
    pub g_aux_hat: Vec<f64>,
    pub conflicted: bool,
}

/// Projects the auxiliary gradient off the base gradient when they conflict,
/// then adds the two.
pub fn project_if_conflict(g_ltr: &[f64], g_aux: &[f64], rule: ProjectionRule) -> Projection {
    let cos = cos_angle(g_aux, g_ltr);
    let nn = dot(g_ltr, g_ltr);
    if !(cos < 0.0) || nn.sqrt() < NORM_EPS {
        return Projection {
            g_rl: g_aux.iter().zip(g_ltr).map(|(a, b)| a + b).collect(),
            g_aux_hat: g_aux.to_vec(),
            conflicted: false,
        };
    }
    let coef = match rule {
        ProjectionRule::Orthogonal => dot(g_aux, g_ltr) / nn,
        ProjectionRule::LiteralCosine => cos / nn,
    };
    let g_aux_hat: Vec<f64> = g_aux.iter().zip(g_ltr).map(|(a, b)| a - coef * b).collect();
    let g_rl = g_aux_hat.iter().zip(g_ltr).map(|(a, b)| a + b).collect();
    Projection {
        g_rl,
        g_aux_hat,
        conflicted: true,
    }
}

impl GradPair {
    pub fn project(&self, rule: ProjectionRule) -> Projection {
        project_if_conflict(&self.g_ltr, &self.g_aux, rule)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConflictStats {
    /// `(layer name, conflicted)` in span order.
    pub per_layer: Vec<(String, bool)>,
    pub fraction: f64,
}

/// Per-layer conflict flags (negative cosine of the layer sub-vectors).
pub fn conflict_stats(pair: &GradPair) -> ConflictStats {
    let per_layer: Vec<(String, bool)> = pair
        .layer_spans
        .iter()
        .map(|s| {
            let r = s.start..s.start + s.len;
            (s.name.clone(), cos_angle(&pair.g_aux[r.clone()], &pair.g_ltr[r]) < 0.0)
        })
        .collect();
    let flagged = per_layer.iter().filter(|(_, c)| *c).count();
    let fraction = if per_layer.is_empty() {
        0.0
    } else {
        flagged as f64 / per_layer.len() as f64
    };
    ConflictStats { per_layer, fraction }
}
