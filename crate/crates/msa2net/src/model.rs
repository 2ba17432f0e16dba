//! The full segmentation network: encoder → bridge → decoder, with guidance
//! modes that fix or learn the kernel schedule and ablation switches that
//! remove the bridge or replace the grouped decoder with a plain head.

use crate::adaptive_conv::{Phase, SelectionMode};
use crate::bridge::ConvBridge;
use crate::decoder::{MsaDecoder, PlainDecoder, SegmentationResult};
use crate::encoder::{Encoder, EncoderConfig};
use crate::fingerprint::{Fingerprint, KernelCandidateMatrix};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Param, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt;

/// How kernel sizes are chosen: fixed quartile schedules, the base schedule,
/// or learned selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Guidance {
    Q1,
    Q2,
    Q3,
    None,
    SelfAdaptive,
}

impl Guidance {
    pub fn parse(s: &str) -> Option<Guidance> {
        match s.to_ascii_lowercase().as_str() {
            "q1" => Some(Guidance::Q1),
            "q2" => Some(Guidance::Q2),
            "q3" => Some(Guidance::Q3),
            "none" => Some(Guidance::None),
            "selfadaptive" | "self-adaptive" | "self_adaptive" => Some(Guidance::SelfAdaptive),
            _ => None,
        }
    }

    /// Fixed schedules freeze the selection logits.
    pub fn is_fixed(&self) -> bool {
        !matches!(self, Guidance::SelfAdaptive)
    }

    /// The candidate matrix this guidance derives from a fingerprint.
    /// Quartile modes broadcast a single quartile as the shift; `None` keeps
    /// the base kernels; self-adaptive uses the full pooled quartile vector.
    pub fn candidate_matrix(&self, fp: &Fingerprint) -> KernelCandidateMatrix {
        let q = fp.pooled_quartiles;
        match self {
            Guidance::Q1 => KernelCandidateMatrix::from_shift([1.0 + q[0]; 4]),
            Guidance::Q2 => KernelCandidateMatrix::from_shift([1.0 + q[1]; 4]),
            Guidance::Q3 => KernelCandidateMatrix::from_shift([1.0 + q[2]; 4]),
            Guidance::None => KernelCandidateMatrix::identity(),
            Guidance::SelfAdaptive => {
                KernelCandidateMatrix::from_shift([1.0 + q[0], 1.0 + q[1], 1.0 + q[2], 1.0 + q[3]])
            }
        }
    }
}

impl fmt::Display for Guidance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Guidance::Q1 => "Q1",
            Guidance::Q2 => "Q2",
            Guidance::Q3 => "Q3",
            Guidance::None => "None",
            Guidance::SelfAdaptive => "SelfAdaptive",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    pub guidance: Guidance,
    pub use_bridge: bool,
    pub use_msadecoder: bool,
    /// The matrix in effect at construction; checkpoints carry it so they
    /// are self-describing.
    pub candidate_matrix: KernelCandidateMatrix,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum DecoderKind {
    Msa(MsaDecoder),
    Plain(PlainDecoder),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Msa2Net {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub bridge: Option<ConvBridge>,
    pub decoder: DecoderKind,
}

/// Kernel sizes deployed per adaptive site, in table layout: one row for the
/// bridge, one per decoder stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelScheduleReport {
    pub bridge: Option<[usize; 4]>,
    pub decoder_stages: Option<Vec<[usize; 4]>>,
}

impl fmt::Display for KernelScheduleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fmt_vec = |v: &[usize; 4]| format!("[{},{},{},{}]", v[0], v[1], v[2], v[3]);
        match &self.bridge {
            Some(v) => writeln!(f, "MSConvBridge        {}", fmt_vec(v))?,
            None => writeln!(f, "MSConvBridge        (disabled)")?,
        }
        match &self.decoder_stages {
            Some(stages) => {
                for (i, v) in stages.iter().enumerate() {
                    writeln!(f, "MSADecoder Stage{}   {}", i + 1, fmt_vec(v))?;
                }
            }
            None => writeln!(f, "MSADecoder          (disabled)")?,
        }
        Ok(())
    }
}

impl KernelScheduleReport {
    /// All reported kernels, flattened in row order (bridge first).
    pub fn flat(&self) -> Vec<usize> {
        let mut out = Vec::new();
        if let Some(b) = self.bridge {
            out.extend(b);
        }
        if let Some(stages) = &self.decoder_stages {
            for s in stages {
                out.extend(*s);
            }
        }
        out
    }

    /// Single-line form for CSV logging.
    pub fn compact(&self) -> String {
        let fmt_vec =
            |v: &[usize; 4]| format!("[{} {} {} {}]", v[0], v[1], v[2], v[3]);
        let mut parts = Vec::new();
        if let Some(b) = &self.bridge {
            parts.push(format!("bridge={}", fmt_vec(b)));
        }
        if let Some(stages) = &self.decoder_stages {
            for (i, s) in stages.iter().enumerate() {
                parts.push(format!("stage{}={}", i + 1, fmt_vec(s)));
            }
        }
        parts.join(" ")
    }
}

impl Msa2Net {
    pub fn new(config: ModelConfig) -> Self {
        config.encoder.validate().expect("invalid encoder config");
        let mut rng = Rng::new(config.seed).derive(0x40DE1);
        let fixed = config.guidance.is_fixed();
        let ungrouped_mode = if fixed {
            SelectionMode::FixedColumnUniform
        } else {
            SelectionMode::Learned
        };
        let encoder = Encoder::new(
            &mut rng,
            &config.encoder,
            &config.candidate_matrix,
            ungrouped_mode,
        );
        let bridge = config.use_bridge.then(|| {
            ConvBridge::new(
                &mut rng,
                &config.encoder.stage_dims,
                &config.candidate_matrix,
                ungrouped_mode,
            )
        });
        let decoder = if config.use_msadecoder {
            DecoderKind::Msa(MsaDecoder::new(
                &mut rng,
                &config.encoder.stage_dims,
                config.num_classes,
                &config.candidate_matrix,
                fixed,
            ))
        } else {
            DecoderKind::Plain(PlainDecoder::new(
                &mut rng,
                &config.encoder.stage_dims,
                config.num_classes,
            ))
        };
        Msa2Net {
            config,
            encoder,
            bridge,
            decoder,
        }
    }

    /// Class logits at input resolution, [num_classes, H, W].
    pub fn forward(&self, t: &mut Tape, image: Var, phase: Phase) -> Var {
        let features = self.encoder.encode(t, image, phase);
        let refined = match &self.bridge {
            Some(bridge) => bridge.refine_all(t, &features.0, phase),
            None => features.0,
        };
        match &self.decoder {
            DecoderKind::Msa(d) => d.decode(t, &refined, phase),
            DecoderKind::Plain(d) => d.decode(t, &refined),
        }
    }

    /// Hard-selection inference producing probabilities and labels.
    pub fn predict(&self, image: &Tensor) -> SegmentationResult {
        let mut t = Tape::new();
        let x = t.constant(image.clone());
        let logits = self.forward(&mut t, x, Phase::Hard);
        let probs = t.softmax_channels(logits);
        SegmentationResult::from_chw(t.value(probs))
    }

    /// Selected kernel sizes per reporting site.
    pub fn kernel_schedule_report(&self) -> KernelScheduleReport {
        let bridge = self.bridge.as_ref().map(|b| b.kernel_vector());
        let decoder_stages = match &self.decoder {
            DecoderKind::Msa(d) => Some(d.stages.iter().map(|s| s.kernel_vector()).collect()),
            DecoderKind::Plain(_) => None,
        };
        KernelScheduleReport {
            bridge,
            decoder_stages,
        }
    }

    pub fn visit_params(&mut self, f: &mut impl FnMut(&mut Param)) {
        self.encoder.visit_params(f);
        if let Some(b) = &mut self.bridge {
            b.visit_params(f);
        }
        match &mut self.decoder {
            DecoderKind::Msa(d) => d.visit_params(f),
            DecoderKind::Plain(d) => d.visit_params(f),
        }
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    /// Ids of every selection-logit parameter (for the guidance contract).
    pub fn selection_logit_params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for stage in &self.encoder.stages {
            if let Some(l) = &stage.aux.adaptive.logits {
                out.push(l);
            }
        }
        if let Some(b) = &self.bridge {
            out.push(&b.selection);
        }
        if let DecoderKind::Msa(d) = &self.decoder {
            for stage in &d.stages {
                for g in &stage.group_convs {
                    if let Some(l) = &g.logits {
                        out.push(l);
                    }
                }
            }
        }
        out
    }
}
