//! Full-reference proxy scores and the threshold rule that turns them into
//! positive pairs.
//!
//! The built-in metric is PSNR; any other metric runs as an external
//! command whose output is parsed for a single number.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::error::{Error, Result};
use crate::manifest::{Manifest, Role};
use crate::patch::{read_pixels, Pixels, Resolution};

pub const PSNR_CAP: f64 = 100.0;
pub const DEFAULT_TIMEOUT_SECS: u64 = 120;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyScore {
    pub value: f64,
    pub metric_name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingConfig {
    pub threshold: f64,
    pub metric_name: String,
}

impl PairingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::Config(format!("pairing threshold must be positive, got {}", self.threshold)));
        }
        Ok(())
    }
}

/// `|a − b| ≤ threshold`. Symmetric and reflexive, not transitive.
pub fn is_positive_pair(a: &ProxyScore, b: &ProxyScore, cfg: &PairingConfig) -> Result<bool> {
    for s in [a, b] {
        if s.metric_name != cfg.metric_name {
            return Err(Error::MetricMismatch(s.metric_name.clone(), cfg.metric_name.clone()));
        }
    }
    Ok((a.value - b.value).abs() <= cfg.threshold)
}

/// PSNR over every pixel of every frame, capped at [`PSNR_CAP`].
pub fn psnr(enh: &Pixels, reference: &Pixels) -> Result<f64> {
    if (enh.frames, enh.height, enh.width) != (reference.frames, reference.height, reference.width) {
        return Err(Error::Shape(format!(
            "psnr of {}×{}×{} against {}×{}×{}",
            enh.frames, enh.height, enh.width, reference.frames, reference.height, reference.width
        )));
    }
    let sse: u64 = enh
        .data
        .iter()
        .zip(&reference.data)
        .map(|(&a, &b)| {
            let d = u64::from(a.abs_diff(b));
            d * d
        })
        .sum();
    if sse == 0 {
        return Ok(PSNR_CAP);
    }
    let mse = sse as f64 / enh.data.len() as f64;
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub name: String,
    /// Shell command with `{enh}` and `{ref}` placeholders; `None` selects
    /// the built-in PSNR.
    #[serde(default)]
    pub command: Option<String>,
    /// Regex whose first capture group is the score; defaults to the last
    /// numeric token of the output.
    #[serde(default)]
    pub pattern: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Score the first pair twice and warn if the tool disagrees with itself.
    #[serde(default)]
    pub repeat_check: bool,
}

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_SECS
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            name: "psnr".into(),
            command: None,
            pattern: None,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            repeat_check: false,
        }
    }
}

/// The last token of `text` that parses as a finite number.
pub fn last_number(text: &str) -> Option<f64> {
    text.split(|c: char| {
        c.is_whitespace() || matches!(c, ',' | ';' | '=' | ':' | '"' | '\'' | '(' | ')' | '[' | ']' | '{' | '}')
    })
    .rev()
    .filter_map(|t| t.parse::<f64>().ok())
    .find(|v| v.is_finite())
}

/// Extracts a score from tool output, either with `pattern` (first capture
/// group, last match wins) or as the last numeric token.
pub fn parse_metric_output(text: &str, pattern: Option<&str>) -> Result<f64> {
    let tool = |msg: String| Error::Tool { msg, output: text.to_string() };
    match pattern {
        None => last_number(text).ok_or_else(|| tool("no numeric token in output".into())),
        Some(p) => {
            let re = Regex::new(p).map_err(|e| Error::Config(format!("bad extraction pattern: {e}")))?;
            let cap = re
                .captures_iter(text)
                .last()
                .and_then(|c| c.get(1).or_else(|| c.get(0)))
                .ok_or_else(|| tool(format!("pattern `{p}` did not match")))?;
            cap.as_str()
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| tool(format!("`{}` is not a finite number", cap.as_str())))
        }
    }
}

fn quote(p: &Path) -> Result<String> {
    let s = p.to_str().ok_or_else(|| Error::Invalid(format!("non-UTF-8 path {}", p.display())))?;
    Ok(shlex::try_quote(s).map_err(|e| Error::Invalid(e.to_string()))?.into_owned())
}

fn kill_tree(child: &mut std::process::Child) {
    #[cfg(unix)]
    if let Ok(pid) = libc::pid_t::try_from(child.id()) {
        // SAFETY: signalling a process group we created; no memory is shared.
        unsafe {
            libc::kill(-pid, libc::SIGKILL);
        }
        return;
    }
    let _ = child.kill();
}

/// Runs the configured command through `sh -c` and parses its stdout.
pub fn external_score(enh: &Path, reference: &Path, cfg: &MetricConfig) -> Result<ProxyScore> {
    let template =
        cfg.command.as_deref().ok_or_else(|| Error::Config(format!("metric `{}` has no command", cfg.name)))?;
    let cmd = template.replace("{enh}", &quote(enh)?).replace("{ref}", &quote(reference)?);
    let mut command = Command::new("sh");
    command.arg("-c").arg(&cmd);
    // A group of its own, so a timeout can stop everything the shell started.
    #[cfg(unix)]
    std::os::unix::process::CommandExt::process_group(&mut command, 0);
    let mut child = command
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::Tool { msg: format!("cannot start `{cmd}`: {e}"), output: String::new() })?;
    // Drain both pipes concurrently so a chatty tool cannot block on a full pipe.
    let mut out_pipe = child.stdout.take().expect("piped");
    let mut err_pipe = child.stderr.take().expect("piped");
    let out_reader = std::thread::spawn(move || {
        let mut s = String::new();
        out_pipe.read_to_string(&mut s).map(|_| s)
    });
    let err_reader = std::thread::spawn(move || {
        let mut s = String::new();
        err_pipe.read_to_string(&mut s).map(|_| s)
    });
    let status = match child.wait_timeout(Duration::from_secs(cfg.timeout_secs))? {
        Some(s) => s,
        None => {
            kill_tree(&mut child);
            let _ = child.wait();
            let output = err_reader.join().ok().and_then(|r| r.ok()).unwrap_or_default();
            return Err(Error::Tool { msg: format!("`{cmd}` timed out after {} s", cfg.timeout_secs), output });
        }
    };
    let stdout = out_reader.join().map_err(|_| Error::Invalid("stdout reader panicked".into()))??;
    let stderr = err_reader.join().map_err(|_| Error::Invalid("stderr reader panicked".into()))??;
    if !status.success() {
        return Err(Error::Tool { msg: format!("`{cmd}` exited with {status}"), output: format!("{stdout}{stderr}") });
    }
    let value = parse_metric_output(&stdout, cfg.pattern.as_deref()).map_err(|e| match e {
        Error::Tool { msg, .. } => Error::Tool { msg, output: format!("{stdout}{stderr}") },
        e => e,
    })?;
    Ok(ProxyScore { value, metric_name: cfg.name.clone() })
}

/// Scores one enhanced patch file against its reference file.
pub fn score_files(enh: &Path, reference: &Path, cfg: &MetricConfig) -> Result<ProxyScore> {
    match cfg.command {
        Some(_) => external_score(enh, reference, cfg),
        None => {
            Ok(ProxyScore { value: psnr(&read_pixels(enh)?, &read_pixels(reference)?)?, metric_name: cfg.name.clone() })
        }
    }
}

/// Fills `proxy_score` for every row. Full rows are scored against their
/// reference (references against themselves); down rows copy their parent.
/// Paths resolve relative to `base`. Records the metric in the preamble.
pub fn label_manifest(m: &Manifest, base: &Path, cfg: &MetricConfig, workers: usize) -> Result<Manifest> {
    m.validate()?;
    let idx = m.index();
    let mut jobs: Vec<(usize, PathBuf, PathBuf)> = Vec::new();
    for (i, r) in m.rows.iter().enumerate() {
        if r.resolution != Resolution::Full {
            continue;
        }
        let reference = match r.role {
            Role::Reference => r,
            Role::Enhanced => {
                let link = r.reference_link.as_ref().ok_or_else(|| Error::MissingReference(r.patch_id.clone()))?;
                &m.rows[idx[link.as_str()]]
            }
        };
        jobs.push((i, base.join(&r.path), base.join(&reference.path)));
    }

    let scores = Mutex::new(vec![None; m.rows.len()]);
    let first_err = Mutex::new(None);
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers.max(1).min(jobs.len().max(1)) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= jobs.len() || first_err.lock().expect("lock").is_some() {
                    break;
                }
                let (i, enh, reference) = &jobs[k];
                match score_files(enh, reference, cfg) {
                    Ok(sc) => scores.lock().expect("lock")[*i] = Some(sc.value),
                    Err(e) => {
                        first_err.lock().expect("lock").get_or_insert(e);
                    }
                }
            });
        }
    });
    if let Some(e) = first_err.into_inner().expect("lock") {
        return Err(e);
    }
    if cfg.repeat_check {
        if let Some((i, enh, reference)) = jobs.iter().find(|j| m.rows[j.0].role == Role::Enhanced) {
            let again = score_files(enh, reference, cfg)?.value;
            let first = scores.lock().expect("lock")[*i].expect("scored");
            if again != first {
                log::warn!("metric `{}` is nondeterministic: {first} then {again} on the same pair", cfg.name);
            }
        }
    }

    let scores = scores.into_inner().expect("lock");
    let mut out = m.clone();
    for (i, r) in out.rows.iter_mut().enumerate() {
        r.proxy_score = match r.resolution {
            Resolution::Full => scores[i],
            Resolution::Down => {
                let parent = r.reference_link.as_ref().ok_or_else(|| Error::MissingReference(r.patch_id.clone()))?;
                scores[idx[parent.as_str()]]
            }
        };
    }
    out.meta.insert("metric".into(), cfg.name.clone());
    Ok(out)
}
