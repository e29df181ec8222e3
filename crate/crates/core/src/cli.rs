//! Subcommand implementations behind the `corm` binary.
//!
//! Every command writes into a staging directory next to `out` and moves it
//! into place only when everything succeeded, so a failed run leaves no
//! partial outputs. An existing `out` is replaced only if it holds a
//! `manifest.toml` from an earlier run.
//!
//! Layout of a `generate` run:
//!
//! ```text
//! out/
//!   manifest.toml
//!   comparison.csv        policy,top1_agreement,mean_kl,final_compression_rate,generation_match
//!   <policy-slug>/
//!     tokens.txt          one line of generated ids per input text
//!     compression.csv     t,rate (mean over texts)
//!     divergence.csv      text,step,top1_agree,kl (teacher forced on the full-cache continuation)
//!     stats.json
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::analysis::{
    curve_to_csv, mean_recent_similarity_fraction, overlap_map, overlap_similarity_correlation,
    query_similarity_map, recent_similarity_fraction, sparsity_profile, step_divergence,
    SparsityProfile,
};
use crate::error::{CormError, Result};
use crate::kv_cache::PolicyConfig;
use crate::manifest::ExperimentManifest;
use crate::model::{generate, perplexity, Model, Sampling};
use crate::trace::{record, replay_policy, AttentionTrace, ReplayOptions};

/// Directory name of the manifest copy that marks a directory as ours.
pub const MANIFEST_COPY: &str = "manifest.toml";
/// Recent-similarity distances reported by `analyze`.
pub const RECENT_KS: [usize; 5] = [1, 2, 4, 8, 16];

struct Staging {
    dir: tempfile::TempDir,
    target: PathBuf,
}

impl Staging {
    fn new(manifest: &ExperimentManifest) -> Result<Self> {
        let out = manifest
            .out
            .as_ref()
            .ok_or_else(|| CormError::InvalidConfig("no output directory given".into()))?;
        let target = manifest.resolve(out);
        if target.exists() && !target.join(MANIFEST_COPY).is_file() {
            let empty = std::fs::read_dir(&target)
                .map(|mut d| d.next().is_none())
                .unwrap_or(false);
            if !empty {
                return Err(CormError::InvalidConfig(format!(
                    "refusing to overwrite {}: not an earlier corm output directory",
                    target.display()
                )));
            }
        }
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&parent).map_err(|e| CormError::io(&parent, e))?;
        let dir = tempfile::Builder::new()
            .prefix(".corm-staging-")
            .tempdir_in(&parent)
            .map_err(|e| CormError::io(&parent, e))?;
        let staging = Staging { dir, target };
        staging.write(MANIFEST_COPY, manifest.to_toml_string())?;
        Ok(staging)
    }

    fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.dir.path().join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CormError::io(parent, e))?;
        }
        std::fs::write(&path, contents).map_err(|e| CormError::io(&path, e))
    }

    fn write_json(&self, rel: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).expect("stats serialize");
        text.push('\n');
        self.write(rel, text)
    }

    fn commit(self) -> Result<PathBuf> {
        if self.target.exists() {
            std::fs::remove_dir_all(&self.target).map_err(|e| CormError::io(&self.target, e))?;
        }
        let staged = self.dir.keep();
        std::fs::rename(&staged, &self.target).map_err(|e| {
            let _ = std::fs::remove_dir_all(&staged);
            CormError::io(&self.target, e)
        })?;
        Ok(self.target)
    }
}

fn sampling(manifest: &ExperimentManifest) -> Sampling {
    match manifest.top_k {
        Some(k) => Sampling::TopK {
            k,
            seed: manifest.seed,
        },
        None => Sampling::Greedy,
    }
}

fn checkpoints(manifest: &ExperimentManifest, len: usize) -> Vec<usize> {
    if manifest.checkpoints.is_empty() {
        (1..=len).collect()
    } else {
        manifest.checkpoints.clone()
    }
}

/// Checkpoint-wise mean of per-text rate series.
fn mean_curve(rate_series: &[Vec<f64>], points: &[usize]) -> Result<Vec<(usize, f64)>> {
    let mut acc: Vec<(usize, f64)> = points.iter().map(|&t| (t, 0.0)).collect();
    for rates in rate_series {
        let curve = crate::analysis::curve_from_rates(rates, points)?;
        acc.iter_mut().zip(curve).for_each(|(a, (_, r))| a.1 += r);
    }
    acc.iter_mut().for_each(|a| a.1 /= rate_series.len() as f64);
    Ok(acc)
}

fn ids_line(tokens: &[u32]) -> String {
    let mut s = tokens
        .iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(" ");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct GenerateStats {
    policy: String,
    texts: usize,
    prompt_tokens: Vec<usize>,
    new_tokens: usize,
    top1_agreement: f64,
    mean_kl: f64,
    final_compression_rate: f64,
    generation_match: f64,
}

/// Generates a continuation of every input under every policy and compares
/// each policy with the full cache.
pub fn cmd_generate(manifest: &ExperimentManifest) -> Result<PathBuf> {
    manifest.validate()?;
    let model = manifest.build_model()?;
    let texts = manifest.load_inputs(model.config().vocab_size)?;
    let staging = Staging::new(manifest)?;
    let threshold = manifest.threshold;
    let sampling = sampling(manifest);

    let mut references = Vec::with_capacity(texts.len());
    for prompt in &texts {
        let full = generate(
            &model,
            prompt,
            PolicyConfig::Full,
            threshold,
            manifest.new_tokens,
            sampling,
        )?;
        let logits = model
            .prefill_with(&full.tokens, PolicyConfig::Full, threshold)?
            .logits()
            .to_vec();
        references.push((full, logits));
    }
    let min_len = references
        .iter()
        .map(|(r, _)| r.tokens.len())
        .min()
        .unwrap_or(0);
    let points = checkpoints(manifest, min_len);

    let mut comparison =
        String::from("policy,top1_agreement,mean_kl,final_compression_rate,generation_match\n");
    for &policy in &manifest.policies {
        let slug = policy.slug();
        let mut tokens_txt = String::new();
        let mut divergence_csv = String::from("text,step,top1_agree,kl\n");
        let mut rate_series = Vec::new();
        let (mut agree, mut kl, mut steps, mut matches) = (0usize, 0.0, 0usize, 0usize);
        for (i, (prompt, (full, full_logits))) in texts.iter().zip(&references).enumerate() {
            let run = generate(
                &model,
                prompt,
                policy,
                threshold,
                manifest.new_tokens,
                sampling,
            )?;
            tokens_txt.push_str(&ids_line(run.generated()));
            matches += usize::from(run.tokens == full.tokens);
            let forced = model.prefill_with(&full.tokens, policy, threshold)?;
            for s in step_divergence(full_logits, forced.logits())? {
                let _ = writeln!(
                    divergence_csv,
                    "{i},{},{},{}",
                    s.step,
                    u8::from(s.top1_agree),
                    s.kl
                );
                agree += usize::from(s.top1_agree);
                kl += s.kl;
                steps += 1;
            }
            rate_series.push(forced.rates()[..min_len].to_vec());
        }
        let curve = mean_curve(&rate_series, &points)?;
        let stats = GenerateStats {
            policy: policy.to_string(),
            texts: texts.len(),
            prompt_tokens: texts.iter().map(Vec::len).collect(),
            new_tokens: manifest.new_tokens,
            top1_agreement: agree as f64 / steps as f64,
            mean_kl: kl / steps as f64,
            final_compression_rate: rate_series.iter().map(|r| r[min_len - 1]).sum::<f64>()
                / texts.len() as f64,
            generation_match: matches as f64 / texts.len() as f64,
        };
        let _ = writeln!(
            comparison,
            "{},{},{},{},{}",
            stats.policy,
            stats.top1_agreement,
            stats.mean_kl,
            stats.final_compression_rate,
            stats.generation_match
        );
        staging.write(&format!("{slug}/tokens.txt"), tokens_txt)?;
        staging.write(&format!("{slug}/compression.csv"), curve_to_csv(&curve))?;
        staging.write(&format!("{slug}/divergence.csv"), divergence_csv)?;
        staging.write_json(&format!("{slug}/stats.json"), &stats)?;
    }
    staging.write("comparison.csv", comparison)?;
    staging.commit()
}

#[derive(Serialize)]
struct PplStats {
    policy: String,
    perplexities: Vec<f64>,
    mean_perplexity: f64,
}

/// Teacher-forced perplexity of every input under every policy.
pub fn cmd_ppl(manifest: &ExperimentManifest) -> Result<PathBuf> {
    manifest.validate()?;
    let model = manifest.build_model()?;
    let texts = manifest.load_inputs(model.config().vocab_size)?;
    let staging = Staging::new(manifest)?;
    let mut comparison = String::from("policy,mean_perplexity\n");
    for &policy in &manifest.policies {
        let perplexities = texts
            .iter()
            .map(|t| perplexity(&model, t, policy, manifest.threshold))
            .collect::<Result<Vec<_>>>()?;
        let stats = PplStats {
            policy: policy.to_string(),
            mean_perplexity: perplexities.iter().sum::<f64>() / perplexities.len() as f64,
            perplexities,
        };
        let _ = writeln!(comparison, "{},{}", stats.policy, stats.mean_perplexity);
        staging.write_json(&format!("{}/stats.json", policy.slug()), &stats)?;
    }
    staging.write("comparison.csv", comparison)?;
    staging.commit()
}

/// Records a full-cache trace of every input as `trace-<i>.cormtrc`.
pub fn cmd_trace(manifest: &ExperimentManifest) -> Result<PathBuf> {
    manifest.validate()?;
    let model = manifest.build_model()?;
    let texts = manifest.load_inputs(model.config().vocab_size)?;
    let staging = Staging::new(manifest)?;
    let mut index = String::from("file,steps,bytes,crc32\n");
    for (i, tokens) in texts.iter().enumerate() {
        let bytes = record(&model, tokens, manifest.trace_cap)?.to_bytes();
        let name = format!("trace-{i}.cormtrc");
        let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("trailer"));
        let _ = writeln!(index, "{name},{},{},{crc:08x}", tokens.len(), bytes.len());
        staging.write(&name, bytes)?;
    }
    staging.write("traces.csv", index)?;
    staging.commit()
}

/// The saved trace named by the manifest, or fresh recordings of its inputs.
fn load_traces(manifest: &ExperimentManifest) -> Result<Vec<AttentionTrace>> {
    match &manifest.trace {
        Some(path) => Ok(vec![AttentionTrace::load(&manifest.resolve(path))?]),
        None => {
            let model: Model = manifest.build_model()?;
            let texts = manifest.load_inputs(model.config().vocab_size)?;
            texts
                .iter()
                .map(|t| record(&model, t, manifest.trace_cap))
                .collect()
        }
    }
}

#[derive(Serialize)]
struct ReplayStats {
    policy: String,
    traces: usize,
    final_compression_rate: f64,
    mean_compression_rate: f64,
    max_cache_size: usize,
}

/// Replays every policy against recorded traces.
pub fn cmd_replay(manifest: &ExperimentManifest) -> Result<PathBuf> {
    manifest.validate()?;
    let traces = load_traces(manifest)?;
    let staging = Staging::new(manifest)?;
    let options = ReplayOptions {
        threshold: manifest.threshold,
        scores: manifest.replay_scores,
    };
    let min_len = traces.iter().map(AttentionTrace::len).min().unwrap_or(0);
    let points = checkpoints(manifest, min_len);
    let mut comparison =
        String::from("policy,final_compression_rate,mean_compression_rate,max_cache_size\n");
    for &policy in &manifest.policies {
        let mut rate_series = Vec::new();
        let mut max_cache = 0;
        for trace in &traces {
            let r = replay_policy(trace, policy, options)?;
            max_cache = max_cache.max(r.timeline.max_cache_size());
            rate_series.push(r.rates[..min_len].to_vec());
        }
        let n = rate_series.len() as f64;
        let stats = ReplayStats {
            policy: policy.to_string(),
            traces: traces.len(),
            final_compression_rate: rate_series.iter().map(|r| r[min_len - 1]).sum::<f64>() / n,
            mean_compression_rate: rate_series
                .iter()
                .map(|r| r.iter().sum::<f64>() / r.len() as f64)
                .sum::<f64>()
                / n,
            max_cache_size: max_cache,
        };
        let _ = writeln!(
            comparison,
            "{},{},{},{}",
            stats.policy,
            stats.final_compression_rate,
            stats.mean_compression_rate,
            stats.max_cache_size
        );
        let slug = policy.slug();
        staging.write(
            &format!("{slug}/compression.csv"),
            curve_to_csv(&mean_curve(&rate_series, &points)?),
        )?;
        staging.write_json(&format!("{slug}/stats.json"), &stats)?;
    }
    staging.write("comparison.csv", comparison)?;
    staging.commit()
}

#[derive(Serialize)]
struct AnalysisSummary {
    traces: usize,
    steps: Vec<usize>,
    layer_means: Vec<f64>,
    layer_spread: f64,
    recent_fraction_k8: f64,
    overlap_similarity_spearman: f64,
    grid_steps: usize,
}

/// Sparsity, similarity, overlap and recent-fraction products.
///
/// Per-head sparsity is averaged over steps and then over traces. Grids and
/// the overlap/similarity correlation use the first trace, cut to its first
/// `grid_limit` steps.
pub fn cmd_analyze(manifest: &ExperimentManifest) -> Result<PathBuf> {
    manifest.validate()?;
    let traces = load_traces(manifest)?;
    let staging = Staging::new(manifest)?;
    let profiles: Vec<SparsityProfile> = traces.iter().map(sparsity_profile).collect();
    let profile = SparsityProfile::average(&profiles)?;
    staging.write("sparsity.csv", profile.to_csv())?;
    staging.write("layer_sparsity.csv", profile.layers_to_csv())?;

    let meta = *traces[0].meta();
    let mut recent = String::from("layer,head,k,fraction\n");
    for l in 0..meta.n_layers {
        for h in 0..meta.n_heads {
            let maps: Vec<_> = traces
                .iter()
                .map(|t| query_similarity_map(t, l, h))
                .collect();
            for k in RECENT_KS {
                let f = maps
                    .iter()
                    .map(|m| recent_similarity_fraction(m, k))
                    .sum::<f64>()
                    / maps.len() as f64;
                let _ = writeln!(recent, "{l},{h},{k},{f}");
            }
        }
    }
    staging.write("recent_fraction.csv", recent)?;

    let first = traces[0].truncated(manifest.grid_limit);
    for l in 0..meta.n_layers {
        for h in 0..meta.n_heads {
            staging.write(
                &format!("similarity/layer{l}-head{h}.csv"),
                query_similarity_map(&first, l, h).to_csv(),
            )?;
            staging.write(
                &format!("overlap/layer{l}-head{h}.csv"),
                overlap_map(&first, l, h).to_csv(),
            )?;
        }
    }
    let summary = AnalysisSummary {
        traces: traces.len(),
        steps: traces.iter().map(AttentionTrace::len).collect(),
        layer_means: profile.layer_means(),
        layer_spread: profile.layer_spread(),
        recent_fraction_k8: traces
            .iter()
            .map(|t| mean_recent_similarity_fraction(t, 8))
            .sum::<f64>()
            / traces.len() as f64,
        overlap_similarity_spearman: if first.len() >= 3 {
            overlap_similarity_correlation(&first, 2)?
        } else {
            0.0
        },
        grid_steps: first.len(),
    };
    staging.write_json("summary.json", &summary)?;
    staging.commit()
}

/// Lists every file below `dir`, relative and sorted.
pub fn list_outputs(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in std::fs::read_dir(dir).map_err(|e| CormError::io(dir, e))? {
            let path = entry.map_err(|e| CormError::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                out.push(path.strip_prefix(root).expect("below root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}
