//! Line-oriented text formats for every artifact a run reads or writes.
//!
//! All numbers are written in their shortest round-trip decimal form, so
//! `parse(write(x)) == x` bit for bit. Grammars (`\t` is a tab):
//!
//! ```text
//! events    := event*                 event := user \t item \t ts \t labels
//! labels    := bit ("," bit)*         bit   := "0" | "1"
//! catalog   := row*                   row   := item \t real ("," real)*
//! sids      := entry*                 entry := item \t sid
//! sid       := token ("," token)*
//! index     := "coevo-index" levels codes capacity clock \n link*
//! link      := item \t sid \t weight \t timestamp
//! codebook  := "coevo-codebook" levels codes dim \n level*
//! level     := "level" l \n (real (" " real)* \n){codes}
//! ```
//!
//! Event timestamps must strictly increase per user. The checkpoint format
//! is described on [`write_checkpoint`].

use std::collections::HashMap;
use std::path::Path;

use coevo_core::coevolution::{Phase, PhaseState, Trainer};
use coevo_core::datagen::Event;
use coevo_core::index::BeamIndex;
use coevo_core::rqkmeans::Codebook;
use coevo_core::tensor::ParamSet;
use coevo_core::{CodebookSpec, SidSequence};

use crate::config::fmt_f64;
use crate::error::{read_file, HarnessError, Result};

fn data_err(origin: &str, line: usize, msg: impl std::fmt::Display) -> HarnessError {
    HarnessError::Data(format!("{origin}:{line}: {msg}"))
}

fn field<T: std::str::FromStr>(raw: Option<&str>, what: &str, origin: &str, line: usize) -> Result<T> {
    let raw = raw.ok_or_else(|| data_err(origin, line, format!("missing {what}")))?;
    raw.trim().parse().map_err(|_| data_err(origin, line, format!("bad {what} {raw:?}")))
}

fn reals(raw: &str, sep: char, origin: &str, line: usize) -> Result<Vec<f64>> {
    raw.split(sep)
        .map(|v| {
            let x: f64 = v.trim().parse().map_err(|_| data_err(origin, line, format!("bad number {v:?}")))?;
            if x.is_finite() {
                Ok(x)
            } else {
                Err(data_err(origin, line, format!("non-finite number {v:?}")))
            }
        })
        .collect()
}

fn join(values: &[f64], sep: &str) -> String {
    values.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(sep)
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty())
}

// ---------------------------------------------------------------- events

pub fn write_events(events: &[Event]) -> String {
    let mut out = String::new();
    for e in events {
        let labels: Vec<&str> = e.labels.iter().map(|&b| if b { "1" } else { "0" }).collect();
        out.push_str(&format!("{}\t{}\t{}\t{}\n", e.user, e.item, e.timestamp, labels.join(",")));
    }
    out
}

/// Parses an event stream, checking per-user timestamps strictly increase
/// and every line carries the same number of labels.
pub fn parse_events(text: &str, origin: &str) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    let mut last: HashMap<u32, (u64, usize)> = HashMap::new();
    let mut width: Option<usize> = None;
    for (n, line) in content_lines(text) {
        let mut parts = line.split('\t');
        let user: u32 = field(parts.next(), "user id", origin, n)?;
        let item: u32 = field(parts.next(), "item id", origin, n)?;
        let timestamp: u64 = field(parts.next(), "timestamp", origin, n)?;
        let raw = parts.next().ok_or_else(|| data_err(origin, n, "missing labels"))?;
        if parts.next().is_some() {
            return Err(data_err(origin, n, "expected 4 tab-separated fields"));
        }
        let labels = raw
            .split(',')
            .map(|b| match b.trim() {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(data_err(origin, n, format!("bad label {other:?}"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        if *width.get_or_insert(labels.len()) != labels.len() {
            return Err(data_err(origin, n, format!("{} labels, earlier lines have {}", labels.len(), width.unwrap_or(0))));
        }
        if let Some(&(prev, prev_line)) = last.get(&user) {
            if timestamp <= prev {
                return Err(data_err(
                    origin,
                    n,
                    format!("timestamp {timestamp} of user {user} does not increase (line {prev_line} has {prev})"),
                ));
            }
        }
        last.insert(user, (timestamp, n));
        events.push(Event { user, item, timestamp, labels });
    }
    Ok(events)
}

pub fn load_events(path: &Path) -> Result<Vec<Event>> {
    parse_events(&read_file(path)?, &path.display().to_string())
}

// ---------------------------------------------------------------- catalog

pub fn write_catalog(content: &[Vec<f64>]) -> String {
    content.iter().enumerate().map(|(i, row)| format!("{i}\t{}\n", join(row, ","))).collect()
}

/// Parses content features; ids must cover `0..n` exactly once and rows
/// must share one width.
pub fn parse_catalog(text: &str, origin: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows: Vec<Option<Vec<f64>>> = Vec::new();
    let mut width = None;
    for (n, line) in content_lines(text) {
        let (id, feats) = line.split_once('\t').ok_or_else(|| data_err(origin, n, "expected item<TAB>features"))?;
        let id: usize = field(Some(id), "item id", origin, n)?;
        let feats = reals(feats, ',', origin, n)?;
        if *width.get_or_insert(feats.len()) != feats.len() {
            return Err(data_err(origin, n, format!("{} features, earlier rows have {}", feats.len(), width.unwrap_or(0))));
        }
        if id >= rows.len() {
            rows.resize(id + 1, None);
        }
        if rows[id].replace(feats).is_some() {
            return Err(data_err(origin, n, format!("item {id} listed twice")));
        }
    }
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| r.ok_or_else(|| HarnessError::Data(format!("{origin}: item {i} has no features"))))
        .collect()
}

pub fn load_catalog(path: &Path) -> Result<Vec<Vec<f64>>> {
    parse_catalog(&read_file(path)?, &path.display().to_string())
}

// ---------------------------------------------------------------- SIDs

pub fn write_sids(sids: &[SidSequence]) -> String {
    sids.iter().enumerate().map(|(i, s)| format!("{i}\t{s}\n")).collect()
}

pub fn parse_sids(text: &str, origin: &str) -> Result<Vec<SidSequence>> {
    let mut out = Vec::new();
    for (n, line) in content_lines(text) {
        let (id, sid) = line.split_once('\t').ok_or_else(|| data_err(origin, n, "expected item<TAB>sid"))?;
        let id: usize = field(Some(id), "item id", origin, n)?;
        if id != out.len() {
            return Err(data_err(origin, n, format!("item {id} out of order, expected {}", out.len())));
        }
        out.push(field(Some(sid), "SID", origin, n)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------- index

/// Header plus one line per link, items ascending, each item's links in
/// stored (descending weight) order.
pub fn write_index(index: &BeamIndex, spec: &CodebookSpec) -> String {
    let mut out = format!(
        "coevo-index {} {} {} {}\n",
        spec.levels,
        spec.codes_per_level,
        index.capacity(),
        index.clock()
    );
    for e in index.entries() {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", e.item, e.sid, fmt_f64(e.weight), e.timestamp));
    }
    out
}

/// Rebuilds an index and its codebook shape from [`write_index`] output.
pub fn parse_index(text: &str, origin: &str) -> Result<(BeamIndex, CodebookSpec)> {
    let mut lines = content_lines(text);
    let (n, header) = lines.next().ok_or_else(|| HarnessError::Data(format!("{origin}: empty index file")))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("coevo-index") {
        return Err(data_err(origin, n, "not an index snapshot"));
    }
    let levels: usize = field(parts.next(), "levels", origin, n)?;
    let codes: usize = field(parts.next(), "codes", origin, n)?;
    let capacity: usize = field(parts.next(), "capacity", origin, n)?;
    let clock: u64 = field(parts.next(), "clock", origin, n)?;
    let spec = CodebookSpec::new(levels, codes, 1).map_err(|e| data_err(origin, n, e))?;
    let mut index = BeamIndex::new(capacity).map_err(|e| data_err(origin, n, e))?;
    for (n, line) in lines {
        let mut parts = line.split('\t');
        let item: u32 = field(parts.next(), "item id", origin, n)?;
        let sid: SidSequence = field(parts.next(), "SID", origin, n)?;
        let weight: f64 = field(parts.next(), "weight", origin, n)?;
        let ts: u64 = field(parts.next(), "timestamp", origin, n)?;
        spec.validate(&sid).map_err(|e| data_err(origin, n, e))?;
        index.insert_link(item, sid, weight, ts).map_err(|e| data_err(origin, n, e))?;
    }
    index.set_clock(clock).map_err(|e| HarnessError::Data(format!("{origin}: {e}")))?;
    Ok((index, spec))
}

// ---------------------------------------------------------------- codebook

pub fn write_codebook(codebook: &Codebook) -> String {
    let spec = codebook.spec();
    let mut out = format!("coevo-codebook {} {} {}\n", spec.levels, spec.codes_per_level, spec.dim);
    for l in 0..spec.levels {
        out.push_str(&format!("level {l}\n"));
        for k in 0..spec.codes_per_level {
            out.push_str(&join(codebook.centroid(l, k), " "));
            out.push('\n');
        }
    }
    out
}

pub fn parse_codebook(text: &str, origin: &str) -> Result<Codebook> {
    let mut lines = content_lines(text);
    let (n, header) = lines.next().ok_or_else(|| HarnessError::Data(format!("{origin}: empty codebook file")))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("coevo-codebook") {
        return Err(data_err(origin, n, "not a codebook file"));
    }
    let levels: usize = field(parts.next(), "levels", origin, n)?;
    let codes: usize = field(parts.next(), "codes", origin, n)?;
    let dim: usize = field(parts.next(), "dim", origin, n)?;
    let spec = CodebookSpec::new(levels, codes, dim).map_err(|e| data_err(origin, n, e))?;
    let mut centroids = Vec::with_capacity(levels);
    for l in 0..levels {
        let (n, tag) = lines.next().ok_or_else(|| HarnessError::Data(format!("{origin}: missing level {l}")))?;
        if tag.trim() != format!("level {l}") {
            return Err(data_err(origin, n, format!("expected `level {l}`")));
        }
        let mut slab = Vec::with_capacity(codes * dim);
        for _ in 0..codes {
            let (n, row) = lines.next().ok_or_else(|| HarnessError::Data(format!("{origin}: level {l} is short")))?;
            let row = reals(row.trim(), ' ', origin, n)?;
            if row.len() != dim {
                return Err(data_err(origin, n, format!("{} values, expected {dim}", row.len())));
            }
            slab.extend(row);
        }
        centroids.push(slab);
    }
    if let Some((n, _)) = lines.next() {
        return Err(data_err(origin, n, "trailing content"));
    }
    Codebook::from_centroids(spec, centroids).map_err(|e| HarnessError::Data(format!("{origin}: {e}")))
}

// ---------------------------------------------------------------- checkpoint

const CHECKPOINT_MAGIC: &str = "coevo-checkpoint 1";

fn opt_f64(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), fmt_f64)
}

fn write_set(out: &mut String, name: &str, set: &ParamSet) {
    out.push_str(&format!("set {name} {} {}\n", set.step, set.len()));
    for p in set.iter() {
        let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("param {} {}\n", p.name, shape.join("x")));
        out.push_str(&format!("value {}\n", join(p.value.data(), " ")));
        out.push_str(&format!("m1 {}\n", join(&p.first_moment, " ")));
        out.push_str(&format!("m2 {}\n", join(&p.second_moment, " ")));
    }
}

/// Serialises every trainable parameter (values and AdamW moments) of the
/// four models together with the trainer's counters and phase state:
///
/// ```text
/// coevo-checkpoint 1
/// config <sha256 of the run config>
/// trainer <step> <clock> <phase> <steps_in_phase> <best|none> <stale_evals> <transition|none>
/// validation <loss>*
/// set <name> <adam step> <n params>       (recommender, tokenizer, reference, csa)
/// param <name> <d1>x<d2>...
/// value <real>*
/// m1 <real>*
/// m2 <real>*
/// ```
///
/// Gradients are not stored; they are zero between steps.
pub fn write_checkpoint(trainer: &Trainer, config_hash: &str) -> String {
    let ph = &trainer.phase;
    let mut out = format!("{CHECKPOINT_MAGIC}\nconfig {config_hash}\n");
    out.push_str(&format!(
        "trainer {} {} {} {} {} {} {}\n",
        trainer.step,
        trainer.clock,
        ph.phase.name(),
        ph.steps_in_phase,
        opt_f64(ph.best),
        ph.stale_evals,
        ph.transition_step.map_or_else(|| "none".into(), |s| s.to_string())
    ));
    out.push_str("validation");
    for v in &ph.validation {
        out.push(' ');
        out.push_str(&fmt_f64(*v));
    }
    out.push('\n');
    write_set(&mut out, "recommender", trainer.recommender.params());
    write_set(&mut out, "tokenizer", trainer.tokenizer.params());
    write_set(&mut out, "reference", trainer.reference.params());
    write_set(&mut out, "csa", trainer.csa.params());
    out
}

struct Lines<'a> {
    inner: Box<dyn Iterator<Item = (usize, &'a str)> + 'a>,
    origin: &'a str,
}

impl<'a> Lines<'a> {
    /// Next line, which must start with `tag`; returns the remainder.
    fn expect(&mut self, tag: &str) -> Result<(usize, &'a str)> {
        let (n, line) = self
            .inner
            .next()
            .ok_or_else(|| HarnessError::Data(format!("{}: truncated, expected `{tag}`", self.origin)))?;
        let rest = line
            .strip_prefix(tag)
            .filter(|r| r.is_empty() || r.starts_with(' '))
            .ok_or_else(|| data_err(self.origin, n, format!("expected `{tag}`")))?;
        Ok((n, rest.trim_start()))
    }
}

fn parse_opt<T: std::str::FromStr>(raw: Option<&str>, what: &str, origin: &str, n: usize) -> Result<Option<T>> {
    match raw {
        Some("none") => Ok(None),
        other => field(other, what, origin, n).map(Some),
    }
}

fn read_set(lines: &mut Lines<'_>, name: &str, target: &mut ParamSet) -> Result<()> {
    let origin = lines.origin;
    let (n, rest) = lines.expect("set")?;
    let mut parts = rest.split_whitespace();
    if parts.next() != Some(name) {
        return Err(data_err(origin, n, format!("expected parameter set `{name}`")));
    }
    let step: u64 = field(parts.next(), "optimizer step", origin, n)?;
    let count: usize = field(parts.next(), "parameter count", origin, n)?;
    if count != target.len() {
        return Err(data_err(origin, n, format!("{count} parameters, the model has {}", target.len())));
    }
    for p in target.iter_mut() {
        let (n, rest) = lines.expect("param")?;
        let (pname, shape) = rest.split_once(' ').ok_or_else(|| data_err(origin, n, "expected name and shape"))?;
        let want: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        if pname != p.name || shape != want.join("x") {
            return Err(data_err(origin, n, format!("parameter {pname} {shape} does not match {} {}", p.name, want.join("x"))));
        }
        let mut vec_line = |tag: &str| -> Result<Vec<f64>> {
            let (n, rest) = lines.expect(tag)?;
            let v = if rest.is_empty() { Vec::new() } else { reals(rest, ' ', origin, n)? };
            if v.len() != p.value.len() {
                return Err(data_err(origin, n, format!("{} values, expected {}", v.len(), p.value.len())));
            }
            Ok(v)
        };
        let value = vec_line("value")?;
        let m1 = vec_line("m1")?;
        let m2 = vec_line("m2")?;
        p.value.data_mut().copy_from_slice(&value);
        p.first_moment = m1;
        p.second_moment = m2;
        p.zero_grad();
    }
    target.step = step;
    Ok(())
}

/// Restores a checkpoint into a trainer built from the same configuration.
/// Rejects checkpoints written under a different config hash.
pub fn read_checkpoint(text: &str, origin: &str, trainer: &mut Trainer, config_hash: &str) -> Result<()> {
    let mut lines = Lines { inner: Box::new(content_lines(text)), origin };
    lines.expect(CHECKPOINT_MAGIC)?;
    let (n, hash) = lines.expect("config")?;
    if hash != config_hash {
        return Err(data_err(origin, n, format!("checkpoint was written under config {hash}, not {config_hash}")));
    }
    let (n, rest) = lines.expect("trainer")?;
    let mut p = rest.split_whitespace();
    let step: u64 = field(p.next(), "step", origin, n)?;
    let clock: u64 = field(p.next(), "clock", origin, n)?;
    let phase = match p.next() {
        Some("warmup") => Phase::Warmup,
        Some("dynamic") => Phase::Dynamic,
        other => return Err(data_err(origin, n, format!("bad phase {other:?}"))),
    };
    let steps_in_phase: u64 = field(p.next(), "steps in phase", origin, n)?;
    let best: Option<f64> = parse_opt(p.next(), "best loss", origin, n)?;
    let stale_evals: usize = field(p.next(), "stale evaluations", origin, n)?;
    let transition_step: Option<u64> = parse_opt(p.next(), "transition step", origin, n)?;
    let (n, rest) = lines.expect("validation")?;
    let validation = if rest.is_empty() { Vec::new() } else { reals(rest, ' ', origin, n)? };
    let mut next = trainer.clone();
    read_set(&mut lines, "recommender", next.recommender.params_mut())?;
    read_set(&mut lines, "tokenizer", next.tokenizer.params_mut())?;
    read_set(&mut lines, "reference", next.reference.params_mut())?;
    read_set(&mut lines, "csa", next.csa.params_mut())?;
    if let Some((n, _)) = lines.inner.next() {
        return Err(data_err(origin, n, "trailing content"));
    }
    next.step = step;
    next.clock = clock;
    next.phase = PhaseState { phase, steps_in_phase, validation, best, stale_evals, transition_step };
    *trainer = next;
    Ok(())
}
