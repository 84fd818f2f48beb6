//! Synthetic duplex transduction episodes.
//!
//! An episode is a source-token stream cut into fixed-size chunks, each
//! chunk paired with the reference incremental output for it: the reference
//! emits a semantic unit's translation in exactly the chunk where the unit's
//! final token arrives, and stays silent elsewhere. All times are integral
//! milliseconds so tiling and latency arithmetic are exact.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::EnvConfig;
use crate::{Error, Result};

/// Index into the source vocabulary.
pub type SourceToken = u16;
/// Index into the target vocabulary.
pub type TargetToken = u16;

/// Total function from source symbols to non-empty target token sequences.
///
/// Every translation starts with a head token unique to the symbol, and any
/// second token comes from a disjoint tail pool, so distinct symbol
/// sequences always map to distinct translations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    entries: Vec<Vec<TargetToken>>,
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub id: u64,
}

impl Lexicon {
    pub fn generate(cfg: &EnvConfig) -> Lexicon {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.lexicon_seed);
        let entries = (0..cfg.source_vocab)
            .map(|sym| {
                let head = sym as TargetToken;
                if cfg.tail_vocab > 0 && rng.gen_bool(0.5) {
                    let tail = cfg.source_vocab + rng.gen_range(0..cfg.tail_vocab);
                    vec![head, tail as TargetToken]
                } else {
                    vec![head]
                }
            })
            .collect();
        Lexicon {
            entries,
            source_vocab: cfg.source_vocab,
            target_vocab: cfg.target_vocab(),
            id: cfg.lexicon_seed,
        }
    }

    /// Placeholder lexicon for episodes loaded from disk, where only the
    /// reference outputs are known. Symbol-level translations are empty, so
    /// observations expose no partially-heard-unit content.
    pub fn opaque(source_vocab: usize, target_vocab: usize) -> Lexicon {
        Lexicon {
            entries: vec![Vec::new(); source_vocab],
            source_vocab,
            target_vocab,
            id: 0,
        }
    }

    pub fn translate_symbol(&self, sym: SourceToken) -> &[TargetToken] {
        &self.entries[sym as usize]
    }

    pub fn translate(&self, tokens: &[SourceToken]) -> Vec<TargetToken> {
        tokens
            .iter()
            .flat_map(|s| self.translate_symbol(*s).iter().copied())
            .collect()
    }
}

/// A semantic unit: the smallest source span whose translation is
/// determined. Completion of a unit licenses emission of its translation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceUnit {
    pub tokens: Vec<SourceToken>,
    pub duration_per_token_ms: u64,
    pub unit_id: usize,
}

/// One slice of the input stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub source_tokens: Vec<SourceToken>,
    pub start_ms: u64,
    pub end_ms: u64,
    /// Units whose final token lies in this chunk.
    pub completes_units: Vec<usize>,
}

/// A full synthetic duplex episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub units: Vec<SourceUnit>,
    pub chunks: Vec<Chunk>,
    /// Reference incremental output per chunk; empty when no unit completes.
    pub references: Vec<Vec<TargetToken>>,
    pub reference_durations_ms: Vec<u64>,
    pub lexicon: Lexicon,
    pub seed: u64,
}

impl Episode {
    pub fn num_chunks(&self) -> usize {
        self.chunks.len()
    }

    pub fn duration_ms(&self) -> u64 {
        self.chunks.last().map(|c| c.end_ms).unwrap_or(0)
    }

    pub fn source_len(&self) -> usize {
        self.chunks.iter().map(|c| c.source_tokens.len()).sum()
    }

    /// Total reference output, in order.
    pub fn reference_concat(&self) -> Vec<TargetToken> {
        self.references.iter().flatten().copied().collect()
    }
}

/// The policy's output for one chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkEmission {
    pub tokens: Vec<TargetToken>,
    pub duration_ms: u64,
    pub emitted_at_ms: u64,
    /// Whether the emission was properly terminated. Truncated emissions
    /// serialize without a closing marker and fail the format check.
    pub closed: bool,
}

impl ChunkEmission {
    pub fn silent(at_ms: u64) -> ChunkEmission {
        ChunkEmission {
            tokens: Vec::new(),
            duration_ms: 0,
            emitted_at_ms: at_ms,
            closed: true,
        }
    }
}

/// What the policy sees before acting on chunk `t`: the source consumed so
/// far, how much owed translation is outstanding, and how much has already
/// been spoken.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// 1-based index of the current chunk.
    pub chunk_index: usize,
    pub chunk_end_ms: u64,
    /// Per-symbol counts over all source tokens heard through chunk `t`.
    pub source_counts: Vec<u32>,
    pub tokens_seen: usize,
    /// Units completed through chunk `t` whose translations have not yet
    /// been covered by emitted tokens.
    pub pending_units: usize,
    /// Translations of everything heard so far, in stream order: completed
    /// units first (a prefix of length `completed_len`), then the
    /// translations of partially heard units.
    pub owed_stream: Vec<TargetToken>,
    pub completed_len: usize,
    /// Content tokens emitted over all previous chunks.
    pub emitted_tokens: usize,
}

/// Builds a deterministic episode from a seed and a validated config.
pub fn generate_episode(seed: u64, cfg: &EnvConfig) -> Result<Episode> {
    cfg.validate()?;
    let lexicon = Lexicon::generate(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let n_units = rng.gen_range(cfg.units_min..=cfg.units_max);
    let src_ms = cfg.source_token_ms();
    let units: Vec<SourceUnit> = (0..n_units)
        .map(|unit_id| {
            let len = rng.gen_range(cfg.unit_tokens_min..=cfg.unit_tokens_max);
            let tokens = (0..len)
                .map(|_| rng.gen_range(0..cfg.source_vocab) as SourceToken)
                .collect();
            SourceUnit {
                tokens,
                duration_per_token_ms: src_ms,
                unit_id,
            }
        })
        .collect();

    Ok(assemble_episode(units, lexicon, cfg, seed))
}

/// Chunks a unit stream and derives the reference outputs.
fn assemble_episode(units: Vec<SourceUnit>, lexicon: Lexicon, cfg: &EnvConfig, seed: u64) -> Episode {
    let src_ms = cfg.source_token_ms();
    let tgt_ms = cfg.target_token_ms();

    let flat: Vec<SourceToken> = units.iter().flat_map(|u| u.tokens.iter().copied()).collect();
    // Flat index of each unit's final token.
    let mut unit_ends = Vec::with_capacity(units.len());
    let mut acc = 0usize;
    for u in &units {
        acc += u.tokens.len();
        unit_ends.push(acc - 1);
    }

    let mut chunks = Vec::new();
    let mut references = Vec::new();
    let mut reference_durations_ms = Vec::new();
    let mut pos = 0usize;
    while pos < flat.len() {
        let end = (pos + cfg.chunk_tokens).min(flat.len());
        let completes: Vec<usize> = unit_ends
            .iter()
            .enumerate()
            .filter(|(_, &e)| e >= pos && e < end)
            .map(|(i, _)| i)
            .collect();
        let mut reference = Vec::new();
        for &u in &completes {
            reference.extend(lexicon.translate(&units[u].tokens));
        }
        reference_durations_ms.push(reference.len() as u64 * tgt_ms);
        references.push(reference);
        chunks.push(Chunk {
            source_tokens: flat[pos..end].to_vec(),
            start_ms: pos as u64 * src_ms,
            end_ms: end as u64 * src_ms,
            completes_units: completes,
        });
        pos = end;
    }

    Episode {
        units,
        chunks,
        references,
        reference_durations_ms,
        lexicon,
        seed,
    }
}

/// Checks every structural invariant of an episode. Returns the first
/// violation found.
pub fn check_episode(ep: &Episode) -> Result<()> {
    if ep.references.len() != ep.chunks.len() {
        return Err(Error::Contract(format!(
            "episode has {} chunks but {} references",
            ep.chunks.len(),
            ep.references.len()
        )));
    }
    if ep.reference_durations_ms.len() != ep.chunks.len() {
        return Err(Error::Contract("reference durations length mismatch".into()));
    }
    // Chunks tile the timeline with no gaps or overlap.
    let mut cursor = 0u64;
    for (i, c) in ep.chunks.iter().enumerate() {
        if c.source_tokens.is_empty() {
            return Err(Error::Contract(format!("chunk {i} is empty")));
        }
        if c.start_ms != cursor {
            return Err(Error::Contract(format!(
                "chunk {i} starts at {} ms, expected {} ms",
                c.start_ms, cursor
            )));
        }
        if c.end_ms <= c.start_ms {
            return Err(Error::Contract(format!("chunk {i} has non-positive span")));
        }
        cursor = c.end_ms;
    }
    let span_sum: u64 = ep.chunks.iter().map(|c| c.end_ms - c.start_ms).sum();
    if span_sum != ep.duration_ms() {
        return Err(Error::Contract("chunk spans do not sum to duration".into()));
    }
    // References appear exactly at unit completions.
    for (i, c) in ep.chunks.iter().enumerate() {
        if ep.references[i].is_empty() != c.completes_units.is_empty() {
            return Err(Error::Contract(format!(
                "chunk {i}: reference emptiness disagrees with completions"
            )));
        }
    }
    // Completion bookkeeping matches unit geometry when units are present.
    if !ep.units.is_empty() {
        for u in &ep.units {
            if u.tokens.is_empty() {
                return Err(Error::Contract(format!("unit {} is empty", u.unit_id)));
            }
            if ep.lexicon.translate(&u.tokens).is_empty() && !ep.lexicon.entries.iter().all(Vec::is_empty) {
                return Err(Error::Contract(format!(
                    "unit {} has an empty translation",
                    u.unit_id
                )));
            }
        }
        let mut seen: Vec<usize> = ep
            .chunks
            .iter()
            .flat_map(|c| c.completes_units.iter().copied())
            .collect();
        let sorted = seen.windows(2).all(|w| w[0] < w[1]);
        seen.dedup();
        if !sorted || seen.len() != ep.units.len() {
            return Err(Error::Contract(
                "unit completions are not exactly the unit set in order".into(),
            ));
        }
        // Translations are injective over the episode's distinct units.
        let mut outputs: HashSet<Vec<TargetToken>> = HashSet::new();
        let mut inputs: HashSet<Vec<SourceToken>> = HashSet::new();
        let lexicon_known = !ep.lexicon.entries.iter().all(Vec::is_empty);
        for u in &ep.units {
            if inputs.insert(u.tokens.clone()) && lexicon_known {
                let tr = ep.lexicon.translate(&u.tokens);
                if !outputs.insert(tr) {
                    return Err(Error::Contract(
                        "two distinct units share a translation".into(),
                    ));
                }
            }
        }
        if lexicon_known {
            let all_tokens: Vec<SourceToken> = ep
                .units
                .iter()
                .flat_map(|u| u.tokens.iter().copied())
                .collect();
            if ep.reference_concat() != ep.lexicon.translate(&all_tokens) {
                return Err(Error::Contract(
                    "concatenated references differ from the lexicon translation".into(),
                ));
            }
        }
    }
    Ok(())
}

/// The trajectory that emits each unit's translation in the chunk that
/// completes it and stays silent otherwise.
pub fn reference_trajectory(ep: &Episode) -> Vec<ChunkEmission> {
    ep.chunks
        .iter()
        .zip(&ep.references)
        .zip(&ep.reference_durations_ms)
        .map(|((chunk, reference), &dur)| ChunkEmission {
            tokens: reference.clone(),
            duration_ms: dur,
            emitted_at_ms: chunk.end_ms,
            closed: true,
        })
        .collect()
}

/// Packages the state visible to the policy before it acts on chunk `t`
/// (1-based), given the emissions it produced for chunks `1..t`.
pub fn observe(ep: &Episode, t: usize, history: &[ChunkEmission]) -> Result<Observation> {
    if t == 0 || t > ep.chunks.len() {
        return Err(Error::Contract(format!(
            "chunk index {t} out of range 1..={}",
            ep.chunks.len()
        )));
    }
    if history.len() != t - 1 {
        return Err(Error::Contract(format!(
            "history has {} entries, expected {}",
            history.len(),
            t - 1
        )));
    }

    let mut source_counts = vec![0u32; ep.lexicon.source_vocab];
    let mut tokens_seen = 0usize;
    for chunk in &ep.chunks[..t] {
        for &s in &chunk.source_tokens {
            source_counts[s as usize] += 1;
        }
        tokens_seen += chunk.source_tokens.len();
    }

    let emitted_tokens: usize = history.iter().map(|e| e.tokens.len()).sum();

    // Completed portion of the owed stream comes straight from the
    // references; the partial portion from symbol-level translations of
    // tokens heard inside not-yet-complete units.
    let mut owed_stream: Vec<TargetToken> = Vec::new();
    for reference in &ep.references[..t] {
        owed_stream.extend_from_slice(reference);
    }
    let completed_len = owed_stream.len();

    let lexicon_known = !ep.lexicon.entries.iter().all(Vec::is_empty);

    // Partially heard units extend the owed stream past the completed part.
    if lexicon_known {
        let mut consumed = 0usize;
        for u in &ep.units {
            if consumed >= tokens_seen {
                break;
            }
            let visible = (tokens_seen - consumed).min(u.tokens.len());
            if visible < u.tokens.len() {
                for &s in &u.tokens[..visible] {
                    owed_stream.extend_from_slice(ep.lexicon.translate_symbol(s));
                }
            }
            consumed += visible;
        }
    }

    // Credit completed units against emitted tokens in completion order; a
    // unit counts as emitted once the cumulative emitted token count covers
    // its translation.
    let mut credited = 0usize;
    let mut covered = 0usize;
    let mut completed_total = 0usize;
    for (chunk, reference) in ep.chunks[..t].iter().zip(&ep.references[..t]) {
        if reference.is_empty() {
            continue;
        }
        let unit_lens: Vec<usize> = if lexicon_known && !chunk.completes_units.is_empty() {
            chunk
                .completes_units
                .iter()
                .map(|&uid| ep.lexicon.translate(&ep.units[uid].tokens).len())
                .collect()
        } else {
            vec![reference.len()]
        };
        for len in unit_lens {
            completed_total += 1;
            if covered + len <= emitted_tokens {
                credited += 1;
            }
            covered += len;
        }
    }
    let pending_units = completed_total - credited;

    Ok(Observation {
        chunk_index: t,
        chunk_end_ms: ep.chunks[t - 1].end_ms,
        source_counts,
        tokens_seen,
        pending_units,
        owed_stream,
        completed_len,
        emitted_tokens,
    })
}

// ---------------------------------------------------------------------------
// Token naming and dataset files
// ---------------------------------------------------------------------------

pub fn source_token_name(tok: SourceToken) -> String {
    format!("s{tok}")
}

pub fn target_token_name(tok: TargetToken) -> String {
    format!("t{tok}")
}

pub fn parse_target_token(name: &str) -> Option<TargetToken> {
    name.strip_prefix('t')?.parse().ok()
}

fn parse_source_token(name: &str) -> Option<SourceToken> {
    name.strip_prefix('s')?.parse().ok()
}

fn ms_to_secs(ms: u64) -> f64 {
    ms as f64 / 1000.0
}

fn secs_to_ms_exact(secs: f64, line: usize, what: &str) -> Result<u64> {
    let ms = secs * 1000.0;
    let rounded = ms.round();
    if (ms - rounded).abs() > 1e-6 || rounded < 0.0 {
        return Err(Error::Parse {
            line,
            message: format!("{what} {secs} is not a non-negative whole millisecond count"),
        });
    }
    Ok(rounded as u64)
}

#[derive(Debug, Serialize, Deserialize)]
struct ChunkRecord {
    tokens: Vec<String>,
    start: f64,
    end: f64,
}

/// One-line-per-episode dataset record. Times are decimal seconds with at
/// most three fractional digits.
#[derive(Debug, Serialize, Deserialize)]
struct EpisodeRecord {
    seed: u64,
    chunks: Vec<ChunkRecord>,
    references: Vec<Vec<String>>,
    ref_durations: Vec<f64>,
}

impl EpisodeRecord {
    fn from_episode(ep: &Episode) -> EpisodeRecord {
        EpisodeRecord {
            seed: ep.seed,
            chunks: ep
                .chunks
                .iter()
                .map(|c| ChunkRecord {
                    tokens: c.source_tokens.iter().map(|&s| source_token_name(s)).collect(),
                    start: ms_to_secs(c.start_ms),
                    end: ms_to_secs(c.end_ms),
                })
                .collect(),
            references: ep
                .references
                .iter()
                .map(|r| r.iter().map(|&t| target_token_name(t)).collect())
                .collect(),
            ref_durations: ep.reference_durations_ms.iter().map(|&d| ms_to_secs(d)).collect(),
        }
    }

    fn into_episode(self, line: usize) -> Result<Episode> {
        let parse_err = |message: String| Error::Parse { line, message };
        if self.references.len() != self.chunks.len() {
            return Err(parse_err(format!(
                "{} chunks but {} references",
                self.chunks.len(),
                self.references.len()
            )));
        }
        if self.ref_durations.len() != self.chunks.len() {
            return Err(parse_err("ref_durations length mismatch".into()));
        }
        let mut chunks = Vec::with_capacity(self.chunks.len());
        let mut max_src = 0usize;
        for (i, c) in self.chunks.iter().enumerate() {
            let source_tokens: Vec<SourceToken> = c
                .tokens
                .iter()
                .map(|name| {
                    parse_source_token(name)
                        .ok_or_else(|| parse_err(format!("bad source token '{name}' in chunk {i}")))
                })
                .collect::<Result<_>>()?;
            for &s in &source_tokens {
                max_src = max_src.max(s as usize + 1);
            }
            chunks.push(Chunk {
                source_tokens,
                start_ms: secs_to_ms_exact(c.start, line, "chunk start")?,
                end_ms: secs_to_ms_exact(c.end, line, "chunk end")?,
                completes_units: Vec::new(),
            });
        }
        let mut references: Vec<Vec<TargetToken>> = Vec::with_capacity(self.references.len());
        let mut max_tgt = 0usize;
        for (i, r) in self.references.iter().enumerate() {
            let toks: Vec<TargetToken> = r
                .iter()
                .map(|name| {
                    parse_target_token(name)
                        .ok_or_else(|| parse_err(format!("bad target token '{name}' in reference {i}")))
                })
                .collect::<Result<_>>()?;
            for &t in &toks {
                max_tgt = max_tgt.max(t as usize + 1);
            }
            references.push(toks);
        }
        let reference_durations_ms = self
            .ref_durations
            .iter()
            .map(|&d| secs_to_ms_exact(d, line, "reference duration"))
            .collect::<Result<Vec<_>>>()?;

        // Reconstruct one synthetic unit per emitting chunk so completion
        // bookkeeping stays usable; symbol-level translations are unknown.
        let mut units = Vec::new();
        let mut pending_src: Vec<SourceToken> = Vec::new();
        for (i, chunk) in chunks.iter_mut().enumerate() {
            pending_src.extend_from_slice(&chunk.source_tokens);
            if !references[i].is_empty() {
                let unit_id = units.len();
                units.push(SourceUnit {
                    tokens: std::mem::take(&mut pending_src),
                    duration_per_token_ms: 0,
                    unit_id,
                });
                chunk.completes_units.push(unit_id);
            }
        }

        let ep = Episode {
            units,
            chunks,
            references,
            reference_durations_ms,
            lexicon: Lexicon::opaque(max_src, max_tgt),
            seed: self.seed,
        };
        check_episode(&ep).map_err(|e| parse_err(e.to_string()))?;
        Ok(ep)
    }
}

/// Writes episodes as line-delimited records.
pub fn write_dataset(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut text = String::new();
    for ep in episodes {
        let record = EpisodeRecord::from_episode(ep);
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Contract(format!("episode does not serialize: {e}")))?;
        let _ = writeln!(text, "{line}");
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a line-delimited episode dataset. Parse failures carry the
/// offending 1-based line number.
pub fn read_dataset(path: &Path) -> Result<Vec<Episode>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut episodes = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EpisodeRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        episodes.push(record.into_episode(line_no)?);
    }
    Ok(episodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_cfg() -> EnvConfig {
        EnvConfig {
            units_min: 1,
            units_max: 1,
            unit_tokens_min: 3,
            unit_tokens_max: 3,
            chunk_tokens: 1,
            ..EnvConfig::default()
        }
    }

    #[test]
    fn single_unit_three_chunks_emits_only_at_the_end() {
        let ep = generate_episode(7, &tiny_cfg()).unwrap();
        assert_eq!(ep.num_chunks(), 3);
        assert!(ep.references[0].is_empty());
        assert!(ep.references[1].is_empty());
        assert!(!ep.references[2].is_empty());
        assert_eq!(ep.references[2], ep.lexicon.translate(&ep.units[0].tokens));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = EnvConfig::default();
        let a = generate_episode(7, &cfg).unwrap();
        let b = generate_episode(7, &cfg).unwrap();
        assert_eq!(a, b);
        let ra = serde_json::to_string(&EpisodeRecord::from_episode(&a)).unwrap();
        let rb = serde_json::to_string(&EpisodeRecord::from_episode(&b)).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn generated_corpus_passes_invariants() {
        let cfg = EnvConfig {
            units_min: 2,
            units_max: 6,
            ..EnvConfig::default()
        };
        for seed in 0..50 {
            let ep = generate_episode(seed, &cfg).unwrap();
            check_episode(&ep).unwrap();
        }
    }

    #[test]
    fn invalid_config_is_a_configuration_error() {
        let mut cfg = EnvConfig::default();
        cfg.source_vocab = 0;
        assert!(matches!(generate_episode(1, &cfg), Err(Error::Config(_))));
        let mut cfg = EnvConfig::default();
        cfg.chunk_tokens = 0;
        assert!(matches!(generate_episode(1, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn reference_emits_exactly_at_completions() {
        for seed in 0..20 {
            let ep = generate_episode(seed, &EnvConfig::default()).unwrap();
            let traj = reference_trajectory(&ep);
            assert_eq!(traj.len(), ep.num_chunks());
            for (t, em) in traj.iter().enumerate() {
                assert_eq!(em.tokens.is_empty(), ep.chunks[t].completes_units.is_empty());
                assert_eq!(em.tokens, ep.references[t]);
                assert_eq!(em.duration_ms, ep.reference_durations_ms[t]);
                assert_eq!(em.emitted_at_ms, ep.chunks[t].end_ms);
            }
        }
    }

    #[test]
    fn reference_concat_equals_lexicon_translation_of_the_source() {
        for seed in 0..50 {
            let ep = generate_episode(seed, &EnvConfig::default()).unwrap();
            let concat: Vec<TargetToken> = reference_trajectory(&ep)
                .iter()
                .flat_map(|e| e.tokens.iter().copied())
                .collect();
            let all_src: Vec<SourceToken> = ep.units.iter().flat_map(|u| u.tokens.clone()).collect();
            assert_eq!(concat, ep.lexicon.translate(&all_src));
        }
    }

    #[test]
    fn observe_pending_counts_current_chunk_completions_at_start() {
        let ep = generate_episode(7, &EnvConfig::default()).unwrap();
        let obs = observe(&ep, 1, &[]).unwrap();
        assert_eq!(obs.pending_units, ep.chunks[0].completes_units.len());
        assert_eq!(obs.emitted_tokens, 0);
    }

    #[test]
    fn observe_after_reference_history_has_no_backlog() {
        for seed in 0..20 {
            let ep = generate_episode(seed, &EnvConfig::default()).unwrap();
            let traj = reference_trajectory(&ep);
            for t in 1..=ep.num_chunks() {
                let obs = observe(&ep, t, &traj[..t - 1]).unwrap();
                // Everything completed before this chunk is already emitted;
                // only the current chunk's completions can be pending.
                assert_eq!(obs.pending_units, ep.chunks[t - 1].completes_units.len());
            }
        }
    }

    #[test]
    fn observe_is_deterministic_and_bounds_checked() {
        let ep = generate_episode(3, &EnvConfig::default()).unwrap();
        let a = observe(&ep, 1, &[]).unwrap();
        let b = observe(&ep, 1, &[]).unwrap();
        assert_eq!(a, b);
        assert!(observe(&ep, 0, &[]).is_err());
        assert!(observe(&ep, ep.num_chunks() + 1, &[]).is_err());
        assert!(observe(&ep, 2, &[]).is_err()); // wrong history length
    }

    #[test]
    fn observe_owed_stream_tracks_partial_units() {
        // One 3-token unit, chunk = 1 token: after the first chunk the owed
        // stream already holds the first symbol's translation, but nothing
        // is completed.
        let ep = generate_episode(7, &tiny_cfg()).unwrap();
        let obs = observe(&ep, 1, &[]).unwrap();
        assert_eq!(obs.completed_len, 0);
        assert_eq!(
            obs.owed_stream,
            ep.lexicon.translate(&ep.units[0].tokens[..1])
        );
        let obs3 = observe(&ep, 3, &reference_trajectory(&ep)[..2]).unwrap();
        assert_eq!(obs3.completed_len, obs3.owed_stream.len());
        assert_eq!(obs3.owed_stream, ep.lexicon.translate(&ep.units[0].tokens));
    }

    #[test]
    fn dataset_roundtrip_preserves_content_and_invariants() {
        let cfg = EnvConfig::default();
        let episodes: Vec<Episode> =
            (0..10).map(|s| generate_episode(s, &cfg).unwrap()).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episodes.jsonl");
        write_dataset(&path, &episodes).unwrap();
        let loaded = read_dataset(&path).unwrap();
        assert_eq!(loaded.len(), episodes.len());
        for (orig, back) in episodes.iter().zip(&loaded) {
            check_episode(back).unwrap();
            assert_eq!(orig.references, back.references);
            assert_eq!(orig.reference_durations_ms, back.reference_durations_ms);
            assert_eq!(orig.duration_ms(), back.duration_ms());
            for (a, b) in orig.chunks.iter().zip(&back.chunks) {
                assert_eq!(a.source_tokens, b.source_tokens);
                assert_eq!(a.start_ms, b.start_ms);
                assert_eq!(a.end_ms, b.end_ms);
            }
        }
    }

    #[test]
    fn dataset_parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let cfg = EnvConfig::default();
        let good = serde_json::to_string(&EpisodeRecord::from_episode(
            &generate_episode(0, &cfg).unwrap(),
        ))
        .unwrap();
        std::fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        match read_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn tiling_is_exact(seed in 0u64..10_000, chunk_tokens in 1usize..5) {
            let cfg = EnvConfig { chunk_tokens, ..EnvConfig::default() };
            let ep = generate_episode(seed, &cfg).unwrap();
            let span_sum: u64 = ep.chunks.iter().map(|c| c.end_ms - c.start_ms).sum();
            prop_assert_eq!(span_sum, ep.duration_ms());
            let mut cursor = 0;
            for c in &ep.chunks {
                prop_assert_eq!(c.start_ms, cursor);
                cursor = c.end_ms;
            }
            prop_assert_eq!(
                ep.duration_ms(),
                ep.source_len() as u64 * cfg.source_token_ms()
            );
        }

        #[test]
        fn references_align_with_completions(seed in 0u64..10_000) {
            let ep = generate_episode(seed, &EnvConfig::default()).unwrap();
            for (r, c) in ep.references.iter().zip(&ep.chunks) {
                prop_assert_eq!(r.is_empty(), c.completes_units.is_empty());
            }
        }
    }
}
