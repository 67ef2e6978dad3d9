//! Activation-trace data model and its on-disk format.
//!
//! A trace set holds, for every prompt, the final-token activations of every
//! layer: the residual-stream hidden state, the MLP gate-projection output and
//! the post-softmax attention row of each head.
//!
//! File layout (little-endian, version 1):
//!
//! ```text
//! header:     "ACTR" | version u32 | num_layers u32 | heads_per_layer u32
//!             | hidden_dim u32 | mlp_dim u32 | num_prompts u32
//!             | model_id (u16 length + UTF-8)
//! per prompt: prompt_id (u16 length + UTF-8) | task_type u8 (0 = recall, 1 = reasoning)
//!             | seq_len u32
//!             | hidden_states   f32[num_layers * hidden_dim]
//!             | mlp_activations f32[num_layers * mlp_dim]
//!             | attention       f32[num_layers * heads_per_layer * seq_len]
//! ```
//!
//! Arrays are row-major in the listed index order. There is no compression.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"ACTR";
pub const FORMAT_VERSION: u32 = 1;
/// Largest declared payload a loader accepts unless told otherwise (16 GiB).
pub const DEFAULT_MAX_PAYLOAD_BYTES: u64 = 16 << 30;
/// Allowed deviation of an attention row sum from 1.
pub const ATTENTION_SUM_TOLERANCE: f64 = 1e-4;

/// Fixed header bytes before the variable-length model id.
pub const HEADER_FIXED_BYTES: usize = 4 + 4 * 6 + 2;

// Keeps validation output bounded when a whole array is garbage.
const MAX_ISSUES_PER_FIELD: usize = 16;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("I/O error: {0}")]
    Stream(#[from] io::Error),
    #[error("empty trace set")]
    EmptyTraceSet,
    #[error("bad magic at byte 0: expected \"ACTR\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {0} at byte 4 (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("invalid header field {field} = {value} at byte {offset}")]
    InvalidHeader {
        field: &'static str,
        value: u64,
        offset: usize,
    },
    #[error("declared payload of {declared} bytes at {location} exceeds the {cap}-byte cap")]
    PayloadTooLarge {
        location: String,
        declared: u64,
        cap: u64,
    },
    #[error("truncated payload in {location} at byte {offset}: need {needed} bytes, {available} available")]
    Truncated {
        location: String,
        offset: usize,
        needed: u64,
        available: usize,
    },
    #[error("invalid task type code {code} in {location} at byte {offset}")]
    InvalidTaskType {
        location: String,
        code: u8,
        offset: usize,
    },
    #[error("invalid UTF-8 in {location} at byte {offset}")]
    InvalidUtf8 { location: String, offset: usize },
    #[error("dimension mismatch between header and body: {count} trailing bytes at byte {offset}")]
    TrailingBytes { offset: usize, count: usize },
    #[error("trace set failed validation: {0}")]
    Invalid(ValidationReport),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Recall,
    Reasoning,
}

impl TaskType {
    pub fn code(self) -> u8 {
        match self {
            TaskType::Recall => 0,
            TaskType::Reasoning => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(TaskType::Recall),
            1 => Some(TaskType::Reasoning),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::Recall => "recall",
            TaskType::Reasoning => "reasoning",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Model dimensions shared by every prompt of a trace set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceConfig {
    pub num_layers: usize,
    pub heads_per_layer: usize,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
    pub model_id: String,
}

impl TraceConfig {
    pub fn new(
        num_layers: usize,
        heads_per_layer: usize,
        hidden_dim: usize,
        mlp_dim: usize,
        model_id: impl Into<String>,
    ) -> Self {
        Self {
            num_layers,
            heads_per_layer,
            hidden_dim,
            mlp_dim,
            model_id: model_id.into(),
        }
    }

    /// Total attention heads (784 for a 28 x 28 model).
    pub fn head_count(&self) -> usize {
        self.num_layers * self.heads_per_layer
    }

    /// Total MLP neurons across layers.
    pub fn neuron_count(&self) -> usize {
        self.num_layers * self.mlp_dim
    }

    fn dims(&self) -> [(&'static str, usize); 4] {
        [
            ("num_layers", self.num_layers),
            ("heads_per_layer", self.heads_per_layer),
            ("hidden_dim", self.hidden_dim),
            ("mlp_dim", self.mlp_dim),
        ]
    }
}

/// Final-token activations of one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTrace {
    pub prompt_id: String,
    pub task_type: TaskType,
    pub seq_len: usize,
    /// `[num_layers][hidden_dim]`
    pub hidden_states: Vec<f32>,
    /// `[num_layers][mlp_dim]`
    pub mlp_activations: Vec<f32>,
    /// `[num_layers][heads_per_layer][seq_len]`
    pub attention: Vec<f32>,
}

impl PromptTrace {
    pub fn hidden_state(&self, cfg: &TraceConfig, layer: usize) -> &[f32] {
        let d = cfg.hidden_dim;
        &self.hidden_states[layer * d..(layer + 1) * d]
    }

    pub fn mlp(&self, cfg: &TraceConfig, layer: usize) -> &[f32] {
        let m = cfg.mlp_dim;
        &self.mlp_activations[layer * m..(layer + 1) * m]
    }

    pub fn attention_row(&self, cfg: &TraceConfig, layer: usize, head: usize) -> &[f32] {
        let start = (layer * cfg.heads_per_layer + head) * self.seq_len;
        &self.attention[start..start + self.seq_len]
    }

    /// Number of float32 values this prompt carries under `cfg`.
    pub fn float_count(cfg: &TraceConfig, seq_len: usize) -> usize {
        cfg.num_layers * (cfg.hidden_dim + cfg.mlp_dim + cfg.heads_per_layer * seq_len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSet {
    pub config: TraceConfig,
    pub prompts: Vec<PromptTrace>,
}

impl TraceSet {
    pub fn new(config: TraceConfig, prompts: Vec<PromptTrace>) -> Self {
        Self { config, prompts }
    }

    pub fn count(&self, task: TaskType) -> usize {
        self.prompts.iter().filter(|p| p.task_type == task).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    /// Empty for set-level issues.
    pub prompt_id: String,
    pub field: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    fn from_issues(issues: Vec<ValidationIssue>) -> Self {
        Self {
            ok: issues.is_empty(),
            issues,
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ok {
            return f.write_str("ok");
        }
        write!(f, "{} issue(s)", self.issues.len())?;
        for issue in self.issues.iter().take(5) {
            write!(f, "; [{}] {}: {}", issue.prompt_id, issue.field, issue.description)?;
        }
        Ok(())
    }
}

struct IssueSink {
    issues: Vec<ValidationIssue>,
}

impl IssueSink {
    fn push(&mut self, prompt_id: &str, field: &str, description: String) {
        self.issues.push(ValidationIssue {
            prompt_id: prompt_id.to_string(),
            field: field.to_string(),
            description,
        });
    }
}

/// Checks every structural and numeric invariant of a trace set.
///
/// Never fails; all problems are returned as issues.
pub fn validate_trace_set(ts: &TraceSet) -> ValidationReport {
    let mut sink = IssueSink { issues: Vec::new() };
    let cfg = &ts.config;

    let mut dims_ok = true;
    for (name, value) in cfg.dims() {
        if value == 0 {
            dims_ok = false;
            sink.push("", name, format!("{name} must be at least 1"));
        } else if value > u32::MAX as usize {
            dims_ok = false;
            sink.push("", name, format!("{name} = {value} does not fit in u32"));
        }
    }
    if cfg.model_id.len() > u16::MAX as usize {
        sink.push("", "model_id", "model_id longer than 65535 bytes".into());
    }
    if ts.prompts.len() > u32::MAX as usize {
        sink.push("", "prompts", "more than u32::MAX prompts".into());
    }

    let mut seen = HashSet::new();
    for p in &ts.prompts {
        if !seen.insert(p.prompt_id.as_str()) {
            sink.push(&p.prompt_id, "prompt_id", "duplicate prompt_id".into());
        }
        if dims_ok {
            validate_prompt(cfg, p, &mut sink);
        }
    }
    ValidationReport::from_issues(sink.issues)
}

fn validate_prompt(cfg: &TraceConfig, p: &PromptTrace, sink: &mut IssueSink) {
    let id = p.prompt_id.as_str();
    if p.prompt_id.len() > u16::MAX as usize {
        sink.push(id, "prompt_id", "prompt_id longer than 65535 bytes".into());
    }
    if p.seq_len == 0 {
        sink.push(id, "seq_len", "seq_len must be at least 1".into());
    } else if p.seq_len > u32::MAX as usize {
        sink.push(id, "seq_len", "seq_len does not fit in u32".into());
    }

    let lengths = [
        ("hidden_states", p.hidden_states.len(), cfg.num_layers * cfg.hidden_dim),
        ("mlp_activations", p.mlp_activations.len(), cfg.num_layers * cfg.mlp_dim),
        (
            "attention",
            p.attention.len(),
            cfg.num_layers * cfg.heads_per_layer * p.seq_len,
        ),
    ];
    let mut shapes_ok = p.seq_len > 0;
    for (field, got, want) in lengths {
        if got != want {
            shapes_ok = false;
            sink.push(id, field, format!("length {got} does not match expected {want}"));
        }
    }
    if !shapes_ok {
        return;
    }

    check_finite(id, "hidden_states", &p.hidden_states, cfg.hidden_dim, "component", sink);
    check_finite(id, "mlp_activations", &p.mlp_activations, cfg.mlp_dim, "neuron", sink);

    let mut reported = 0usize;
    let mut suppressed = 0usize;
    for (row_idx, row) in p.attention.chunks_exact(p.seq_len).enumerate() {
        let layer = row_idx / cfg.heads_per_layer;
        let head = row_idx % cfg.heads_per_layer;
        let problem = attention_row_problem(row);
        if let Some(problem) = problem {
            if reported < MAX_ISSUES_PER_FIELD {
                sink.push(id, "attention", format!("layer {layer}, head {head}: {problem}"));
                reported += 1;
            } else {
                suppressed += 1;
            }
        }
    }
    if suppressed > 0 {
        sink.push(id, "attention", format!("{suppressed} further attention row issue(s)"));
    }
}

fn attention_row_problem(row: &[f32]) -> Option<String> {
    let mut sum = 0.0f64;
    for (pos, &w) in row.iter().enumerate() {
        if !w.is_finite() {
            return Some(format!("non-finite weight at position {pos}"));
        }
        if w < 0.0 {
            return Some(format!("negative weight {w} at position {pos}"));
        }
        sum += f64::from(w);
    }
    if (sum - 1.0).abs() > ATTENTION_SUM_TOLERANCE {
        return Some(format!("attention row not normalized (sum {sum})"));
    }
    None
}

fn check_finite(
    id: &str,
    field: &str,
    values: &[f32],
    width: usize,
    unit: &str,
    sink: &mut IssueSink,
) {
    let mut bad = values
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_finite())
        .map(|(i, v)| (i / width, i % width, *v));
    for (layer, j, v) in bad.by_ref().take(MAX_ISSUES_PER_FIELD) {
        sink.push(id, field, format!("non-finite value {v} at layer {layer}, {unit} {j}"));
    }
    let rest = bad.count();
    if rest > 0 {
        sink.push(id, field, format!("{rest} further non-finite value(s)"));
    }
}

/// Serializes a validated trace set into `out`.
pub fn encode_trace_set<W: Write>(ts: &TraceSet, out: &mut W) -> Result<(), TraceError> {
    if ts.prompts.is_empty() {
        return Err(TraceError::EmptyTraceSet);
    }
    let report = validate_trace_set(ts);
    if !report.ok {
        return Err(TraceError::Invalid(report));
    }
    let cfg = &ts.config;
    out.write_all(&MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for v in [
        cfg.num_layers,
        cfg.heads_per_layer,
        cfg.hidden_dim,
        cfg.mlp_dim,
        ts.prompts.len(),
    ] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    write_str16(out, &cfg.model_id)?;

    let mut buf = Vec::new();
    for p in &ts.prompts {
        write_str16(out, &p.prompt_id)?;
        out.write_all(&[p.task_type.code()])?;
        out.write_all(&(p.seq_len as u32).to_le_bytes())?;
        buf.clear();
        for array in [&p.hidden_states, &p.mlp_activations, &p.attention] {
            buf.extend(array.iter().flat_map(|v| v.to_le_bytes()));
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn write_str16<W: Write>(out: &mut W, s: &str) -> io::Result<()> {
    out.write_all(&(s.len() as u16).to_le_bytes())?;
    out.write_all(s.as_bytes())
}

/// Writes `ts` to `path`, refusing empty or invalid sets.
pub fn write_trace_set(ts: &TraceSet, path: impl AsRef<Path>) -> Result<(), TraceError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    encode_trace_set(ts, &mut bytes)?;
    fs::write(path, bytes).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub max_payload_bytes: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            max_payload_bytes: DEFAULT_MAX_PAYLOAD_BYTES,
        }
    }
}

pub fn load_trace_set(path: impl AsRef<Path>) -> Result<TraceSet, TraceError> {
    load_trace_set_with(path, &LoadOptions::default())
}

pub fn load_trace_set_with(
    path: impl AsRef<Path>,
    opts: &LoadOptions,
) -> Result<TraceSet, TraceError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_trace_set(&bytes, opts)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: u64, location: &dyn Fn() -> String) -> Result<&'a [u8], TraceError> {
        let available = self.bytes.len() - self.pos;
        if n > available as u64 {
            return Err(TraceError::Truncated {
                location: location(),
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let n = n as usize;
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, location: &dyn Fn() -> String) -> Result<u8, TraceError> {
        Ok(self.take(1, location)?[0])
    }

    fn u16(&mut self, location: &dyn Fn() -> String) -> Result<u16, TraceError> {
        let b = self.take(2, location)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, location: &dyn Fn() -> String) -> Result<u32, TraceError> {
        let b = self.take(4, location)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn str16(&mut self, location: &dyn Fn() -> String) -> Result<String, TraceError> {
        let len = self.u16(location)?;
        let start = self.pos;
        let raw = self.take(u64::from(len), location)?;
        String::from_utf8(raw.to_vec()).map_err(|_| TraceError::InvalidUtf8 {
            location: location(),
            offset: start,
        })
    }

    fn f32s(&mut self, count: u64, location: &dyn Fn() -> String) -> Result<Vec<f32>, TraceError> {
        let raw = self.take(count.saturating_mul(4), location)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

/// Parses a trace file image and validates the result.
pub fn decode_trace_set(bytes: &[u8], opts: &LoadOptions) -> Result<TraceSet, TraceError> {
    let mut r = Reader { bytes, pos: 0 };
    let header = || "header".to_string();

    let magic = r.take(4, &header)?;
    if magic != MAGIC {
        return Err(TraceError::BadMagic {
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = r.u32(&header)?;
    if version != FORMAT_VERSION {
        return Err(TraceError::UnsupportedVersion(version));
    }

    let mut dims = [0u32; 5];
    let names = ["num_layers", "heads_per_layer", "hidden_dim", "mlp_dim", "num_prompts"];
    for (slot, name) in dims.iter_mut().zip(names) {
        let offset = r.pos;
        *slot = r.u32(&header)?;
        if *slot == 0 {
            return Err(TraceError::InvalidHeader {
                field: name,
                value: 0,
                offset,
            });
        }
    }
    let [num_layers, heads, hidden_dim, mlp_dim, num_prompts] = dims.map(u64::from);
    let model_id = r.str16(&|| "header model_id".to_string())?;

    let fixed_per_prompt = num_layers * (hidden_dim + mlp_dim) * 4;
    let mut declared = fixed_per_prompt
        .checked_mul(num_prompts)
        .filter(|&d| d <= opts.max_payload_bytes)
        .ok_or_else(|| TraceError::PayloadTooLarge {
            location: "header".to_string(),
            declared: fixed_per_prompt.saturating_mul(num_prompts),
            cap: opts.max_payload_bytes,
        })?;

    let config = TraceConfig::new(
        num_layers as usize,
        heads as usize,
        hidden_dim as usize,
        mlp_dim as usize,
        model_id,
    );

    // Each prompt needs at least its metadata and fixed arrays, so the file
    // length bounds the number of prompts we can actually decode.
    let min_prompt_bytes = 2 + 1 + 4 + fixed_per_prompt;
    let remaining = (bytes.len() - r.pos) as u64;
    let capacity = num_prompts.min(remaining / min_prompt_bytes.max(1) + 1) as usize;
    let mut prompts = Vec::with_capacity(capacity);

    for index in 0..num_prompts as usize {
        let at_start = || format!("prompt {index}");
        let prompt_id = r.str16(&at_start)?;
        let loc = |section: &str| format!("prompt {index} (`{prompt_id}`) {section}");

        let code_offset = r.pos;
        let code = r.u8(&|| loc("task_type"))?;
        let task_type = TaskType::from_code(code).ok_or_else(|| TraceError::InvalidTaskType {
            location: loc("task_type"),
            code,
            offset: code_offset,
        })?;
        let seq_offset = r.pos;
        let seq_len = u64::from(r.u32(&|| loc("seq_len"))?);
        if seq_len == 0 {
            return Err(TraceError::InvalidHeader {
                field: "seq_len",
                value: 0,
                offset: seq_offset,
            });
        }
        let attention_len = num_layers * heads * seq_len;
        declared = declared
            .checked_add(attention_len * 4)
            .filter(|&d| d <= opts.max_payload_bytes)
            .ok_or_else(|| TraceError::PayloadTooLarge {
                location: loc("seq_len"),
                declared: declared.saturating_add(attention_len.saturating_mul(4)),
                cap: opts.max_payload_bytes,
            })?;

        let hidden_states = r.f32s(num_layers * hidden_dim, &|| loc("hidden_states"))?;
        let mlp_activations = r.f32s(num_layers * mlp_dim, &|| loc("mlp_activations"))?;
        let attention = r.f32s(attention_len, &|| loc("attention"))?;
        prompts.push(PromptTrace {
            prompt_id,
            task_type,
            seq_len: seq_len as usize,
            hidden_states,
            mlp_activations,
            attention,
        });
    }

    if r.pos != bytes.len() {
        return Err(TraceError::TrailingBytes {
            offset: r.pos,
            count: bytes.len() - r.pos,
        });
    }

    let ts = TraceSet::new(config, prompts);
    let report = validate_trace_set(&ts);
    if !report.ok {
        return Err(TraceError::Invalid(report));
    }
    Ok(ts)
}

/// Exact encoded size of a trace set, in bytes.
pub fn encoded_len(ts: &TraceSet) -> usize {
    let header = HEADER_FIXED_BYTES + ts.config.model_id.len();
    let body: usize = ts
        .prompts
        .iter()
        .map(|p| 2 + p.prompt_id.len() + 1 + 4 + 4 * PromptTrace::float_count(&ts.config, p.seq_len))
        .sum();
    header + body
}
