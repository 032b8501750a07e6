//! Greedy evaluation rollouts, metric aggregation, and trace export.
//!
//! Evaluation runs the policy greedily (no exploration) and cannot use
//! the success threshold to stop, since the agent has no access to the
//! truth box at test time. Episodes end either at the step budget or
//! when the box revisits a recent state, which indicates a policy limit
//! cycle; on such an oscillation the prediction is the cycle box whose
//! recorded best q-value is highest.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::env::{detect_oscillation, Env, EnvConfig, EnvError, Mode, OSC_EPS, OSC_WINDOW};
use crate::geometry::{centroid_distance_mm, iou, wall_distance_mm, Action, Box3, ACTION_COUNT};
use crate::phantom::{load_manifest_volumes, LabeledVolume, PhantomError};
use crate::qnet::QValues;
use crate::trainer::greedy_action;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    /// The box revisited a recent state.
    Oscillation,
    /// The step budget ran out.
    MaxSteps,
    /// The success threshold fired (training-mode episodes only).
    Threshold,
}

impl Termination {
    pub fn token(self) -> &'static str {
        match self {
            Termination::Oscillation => "oscillation",
            Termination::MaxSteps => "max_steps",
            Termination::Threshold => "threshold",
        }
    }

    pub fn parse_token(s: &str) -> Option<Self> {
        match s {
            "oscillation" => Some(Termination::Oscillation),
            "max_steps" => Some(Termination::MaxSteps),
            "threshold" => Some(Termination::Threshold),
            _ => None,
        }
    }
}

/// One recorded step: the box the agent acted from, the q-values it saw
/// there, the action it chose, the reward it earned, and that box's IoU
/// against the truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub bbox: Box3,
    pub action: Action,
    pub reward: f32,
    pub iou: f64,
    pub q_values: [f32; ACTION_COUNT],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub steps: Vec<TraceStep>,
    pub termination: Termination,
    pub predicted: Box3,
    pub predicted_iou: f64,
}

impl EpisodeTrace {
    pub fn initial_box(&self) -> &Box3 {
        &self.steps[0].bbox
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation requires at least one volume")]
    EmptyManifest,
    #[error("trace line {line}: {msg}")]
    TraceParse { line: usize, msg: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Data(#[from] PhantomError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Runs one greedy episode and returns its trace. Termination is the
/// step budget or oscillation, whichever comes first; on oscillation
/// the prediction is the highest-valued cycle box, on budget the final
/// box.
pub fn rollout<Q: QValues + ?Sized>(
    q: &Q,
    labeled: Arc<LabeledVolume>,
    organ_id: u32,
    env_cfg: &EnvConfig,
) -> Result<EpisodeTrace, EvalError> {
    let env = Env::new(labeled, organ_id, Mode::Eval, env_cfg.clone())?;
    let truth = *env.target();
    let mut state = env.reset(None);
    let mut visited = vec![state.bbox];
    // Best q-value seen at visited[i]; used to rank cycle boxes.
    let mut qmax = Vec::new();
    let mut steps = Vec::new();
    loop {
        let qs = q.q_values(&state.network_input());
        qmax.push(qs.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)));
        let action = greedy_action(&qs);
        let result = env.step(&state, action)?;
        steps.push(TraceStep {
            bbox: state.bbox,
            action,
            reward: result.reward,
            iou: result.iou_before,
            q_values: qs,
        });
        visited.push(result.state.bbox);
        state = result.state;
        if let Some(cycle_start) = detect_oscillation(&visited, OSC_WINDOW, OSC_EPS) {
            // Cycle spans visited[cycle_start..last]; the final box is a
            // repeat of visited[cycle_start], so every candidate has a
            // recorded q. Earliest wins ties.
            let mut best = cycle_start;
            for i in cycle_start + 1..qmax.len() {
                if qmax[i] > qmax[best] {
                    best = i;
                }
            }
            let predicted = visited[best];
            return Ok(EpisodeTrace {
                steps,
                termination: Termination::Oscillation,
                predicted,
                predicted_iou: iou(&predicted, &truth),
            });
        }
        if state.terminal {
            let predicted = state.bbox;
            return Ok(EpisodeTrace {
                steps,
                termination: Termination::MaxSteps,
                predicted,
                predicted_iou: iou(&predicted, &truth),
            });
        }
    }
}

/// Mean, population standard deviation (n denominator), and median
/// (even count averages the two middle order statistics).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SummaryStats {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

pub fn summarize(values: &[f64]) -> SummaryStats {
    assert!(!values.is_empty(), "no values to summarize");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    };
    SummaryStats { mean, std: var.sqrt(), median }
}

#[derive(Clone, Debug)]
pub struct EpisodeEval {
    pub volume: usize,
    pub termination: Termination,
    pub steps: u32,
    pub iou: f64,
    pub wall_mm: f64,
    pub centroid_mm: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub episodes: Vec<EpisodeEval>,
    pub iou: SummaryStats,
    pub wall_mm: SummaryStats,
    pub centroid_mm: SummaryStats,
}

impl EvalReport {
    fn from_episodes(episodes: Vec<EpisodeEval>) -> Self {
        let col = |f: fn(&EpisodeEval) -> f64| -> Vec<f64> { episodes.iter().map(f).collect() };
        let iou = summarize(&col(|e| e.iou));
        let wall_mm = summarize(&col(|e| e.wall_mm));
        let centroid_mm = summarize(&col(|e| e.centroid_mm));
        EvalReport { episodes, iou, wall_mm, centroid_mm }
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    /// Aligned text table of the aggregate metrics.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<24} {:>9} {:>9} {:>9}", "metric", "mean", "std", "median").unwrap();
        let mut row = |name: &str, s: &SummaryStats| {
            writeln!(out, "{:<24} {:>9.4} {:>9.4} {:>9.4}", name, s.mean, s.std, s.median).unwrap();
        };
        row("IoU", &self.iou);
        row("wall distance [mm]", &self.wall_mm);
        row("centroid distance [mm]", &self.centroid_mm);
        writeln!(out, "{:<24} {:>9}", "episodes", self.episodes.len()).unwrap();
        out
    }

    /// Per-episode CSV; aggregates are recomputable from the rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("volume,termination,steps,iou,wall_mm,centroid_mm\n");
        for e in &self.episodes {
            writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6}",
                e.volume,
                e.termination.token(),
                e.steps,
                e.iou,
                e.wall_mm,
                e.centroid_mm
            )
            .unwrap();
        }
        out
    }
}

/// One greedy rollout per volume, aggregated in order.
pub fn evaluate<Q: QValues + ?Sized>(
    q: &Q,
    volumes: &[Arc<LabeledVolume>],
    organ_id: u32,
    env_cfg: &EnvConfig,
) -> Result<EvalReport, EvalError> {
    if volumes.is_empty() {
        return Err(EvalError::EmptyManifest);
    }
    let mut episodes = Vec::with_capacity(volumes.len());
    for (i, vol) in volumes.iter().enumerate() {
        let truth = *Env::new(vol.clone(), organ_id, Mode::Eval, env_cfg.clone())?.target();
        let trace = rollout(q, vol.clone(), organ_id, env_cfg)?;
        let spacing = vol.volume.spacing();
        episodes.push(EpisodeEval {
            volume: i,
            termination: trace.termination,
            steps: trace.steps.len() as u32,
            iou: trace.predicted_iou,
            wall_mm: wall_distance_mm(&trace.predicted, &truth, spacing),
            centroid_mm: centroid_distance_mm(&trace.predicted, &truth, spacing),
        });
    }
    Ok(EvalReport::from_episodes(episodes))
}

/// [`evaluate`] over every volume listed in a manifest file.
pub fn evaluate_manifest<Q: QValues + ?Sized, P: AsRef<Path>>(
    q: &Q,
    manifest: P,
    organ_id: u32,
    env_cfg: &EnvConfig,
) -> Result<EvalReport, EvalError> {
    let volumes: Vec<Arc<LabeledVolume>> =
        load_manifest_volumes(manifest)?.into_iter().map(Arc::new).collect();
    evaluate(q, &volumes, organ_id, env_cfg)
}

/// Report for a perfect oracle that predicts each truth box exactly;
/// a harness self-test for the metric plumbing.
pub fn evaluate_oracle(
    volumes: &[Arc<LabeledVolume>],
    organ_id: u32,
) -> Result<EvalReport, EvalError> {
    if volumes.is_empty() {
        return Err(EvalError::EmptyManifest);
    }
    let mut episodes = Vec::with_capacity(volumes.len());
    for (i, vol) in volumes.iter().enumerate() {
        let truth = *vol
            .truth_box(organ_id)
            .ok_or(EnvError::UnknownOrgan { organ: organ_id })?;
        let spacing = vol.volume.spacing();
        episodes.push(EpisodeEval {
            volume: i,
            termination: Termination::Threshold,
            steps: 0,
            iou: iou(&truth, &truth),
            wall_mm: wall_distance_mm(&truth, &truth, spacing),
            centroid_mm: centroid_distance_mm(&truth, &truth, spacing),
        });
    }
    Ok(EvalReport::from_episodes(episodes))
}

/// Serializes a trace: one CSV row per step, then a final line with the
/// termination reason and predicted box. Floats use shortest-form
/// printing, so parsing recovers them exactly.
pub fn trace_to_csv(trace: &EpisodeTrace) -> String {
    let mut out = String::from(
        "step,x0,y0,z0,x1,y1,z1,action,reward,iou,q0,q1,q2,q3,q4,q5,q6,q7,q8,q9,q10\n",
    );
    for (i, st) in trace.steps.iter().enumerate() {
        let c = st.bbox.corners();
        write!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            i, c[0], c[1], c[2], c[3], c[4], c[5], st.action.token(), st.reward, st.iou
        )
        .unwrap();
        for q in st.q_values {
            write!(out, ",{q}").unwrap();
        }
        out.push('\n');
    }
    let p = trace.predicted.corners();
    writeln!(
        out,
        "end,{},{},{},{},{},{},{},{}",
        trace.termination.token(),
        p[0], p[1], p[2], p[3], p[4], p[5],
        trace.predicted_iou
    )
    .unwrap();
    out
}

pub fn export_trace<P: AsRef<Path>>(trace: &EpisodeTrace, path: P) -> Result<(), EvalError> {
    std::fs::write(path, trace_to_csv(trace))?;
    Ok(())
}

const TRACE_HEADER: &str = "step,x0,y0,z0,x1,y1,z1,action,reward,iou,q0,q1,q2,q3,q4,q5,q6,q7,q8,q9,q10";

fn parse_err(line: usize, msg: impl Into<String>) -> EvalError {
    EvalError::TraceParse { line, msg: msg.into() }
}

fn parse_box(fields: &[&str], line: usize) -> Result<Box3, EvalError> {
    let mut c = [0.0f64; 6];
    for (i, f) in fields.iter().enumerate() {
        c[i] = f
            .parse::<f64>()
            .map_err(|_| parse_err(line, format!("bad coordinate {f:?}")))?;
    }
    Box3::try_new(c[0], c[1], c[2], c[3], c[4], c[5])
        .map_err(|e| parse_err(line, format!("invalid box: {e}")))
}

/// Parses the output of [`trace_to_csv`] / [`export_trace`].
pub fn parse_trace(text: &str) -> Result<EpisodeTrace, EvalError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == TRACE_HEADER => {}
        Some((_, h)) => return Err(parse_err(1, format!("unexpected header {h:?}"))),
        None => return Err(parse_err(1, "empty trace file")),
    }
    let mut steps: Vec<TraceStep> = Vec::new();
    let mut end: Option<(Termination, Box3, f64)> = None;
    for (idx, raw) in lines {
        let line = idx + 1;
        if end.is_some() {
            return Err(parse_err(line, "content after the final line"));
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields[0] == "end" {
            if fields.len() != 9 {
                return Err(parse_err(line, format!("final line has {} fields, want 9", fields.len())));
            }
            let term = Termination::parse_token(fields[1])
                .ok_or_else(|| parse_err(line, format!("unknown termination {:?}", fields[1])))?;
            let bbox = parse_box(&fields[2..8], line)?;
            let piou = fields[8]
                .parse::<f64>()
                .map_err(|_| parse_err(line, format!("bad iou {:?}", fields[8])))?;
            end = Some((term, bbox, piou));
            continue;
        }
        if fields.len() != 21 {
            return Err(parse_err(line, format!("row has {} fields, want 21", fields.len())));
        }
        let step: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(line, format!("bad step index {:?}", fields[0])))?;
        if step != steps.len() {
            return Err(parse_err(line, format!("step index {step} out of order")));
        }
        let bbox = parse_box(&fields[1..7], line)?;
        let action = Action::parse_token(fields[7])
            .ok_or_else(|| parse_err(line, format!("unknown action {:?}", fields[7])))?;
        let reward = fields[8]
            .parse::<f32>()
            .map_err(|_| parse_err(line, format!("bad reward {:?}", fields[8])))?;
        let iou_v = fields[9]
            .parse::<f64>()
            .map_err(|_| parse_err(line, format!("bad iou {:?}", fields[9])))?;
        let mut q_values = [0.0f32; ACTION_COUNT];
        for (i, f) in fields[10..].iter().enumerate() {
            q_values[i] = f
                .parse::<f32>()
                .map_err(|_| parse_err(line, format!("bad q-value {f:?}")))?;
        }
        steps.push(TraceStep { bbox, action, reward, iou: iou_v, q_values });
    }
    let (termination, predicted, predicted_iou) =
        end.ok_or_else(|| parse_err(text.lines().count(), "missing final line"))?;
    if steps.is_empty() {
        return Err(parse_err(2, "trace has no steps"));
    }
    Ok(EpisodeTrace { steps, termination, predicted, predicted_iou })
}
