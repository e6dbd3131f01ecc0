//! Binary file formats, all little-endian.
//!
//! * `MEDS` dataset: `"MEDS"`, u32 version, u32 H, W, c, D, n_scenes, u64
//!   seed, then per scene `H·W·D` f32 features and `H·W` u8 labels.
//! * `MEDC` checkpoint: `"MEDC"`, u32 version, u32 header length, a
//!   `key = value` text header, then every array as f64 in header order.
//! * `MEDP` probability dump: `"MEDP"`, u32 version, u32 K, n_scenes, H, W,
//!   c, then per scene `K·H·W·c` f32 probabilities.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::ensemble::{CalibrationParams, ProbabilityGrid};
use crate::error::{Error, Result};
use crate::model::{BackboneParams, ExpertParams, Linear, ModelDims};
use crate::synthgen::{CategoryGrouping, FrequencyProfile, SceneSample};
use crate::training::{Provenance, TrainMode, TrainedModel};

const VERSION: u32 = 1;

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("unexpected end of file")?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> std::result::Result<(), String> {
        if self.take(4)? != magic {
            return Err(format!("not a {} file", String::from_utf8_lossy(magic)));
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(format!("unsupported version {v}"));
        }
        Ok(())
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, String> {
        let bytes = self.take(n.checked_mul(4).ok_or("array too large")?)?;
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let bytes = self.take(n.checked_mul(8).ok_or("array too large")?)?;
        Ok(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
    }

    fn finish(&self) -> std::result::Result<(), String> {
        if self.pos != self.buf.len() {
            return Err(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit the file format")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// A dataset together with its file header.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub classes: usize,
    pub seed: u64,
    pub scenes: Vec<SceneSample>,
}

impl DatasetFile {
    pub fn height(&self) -> usize {
        self.scenes.first().map_or(0, |s| s.height)
    }

    pub fn width(&self) -> usize {
        self.scenes.first().map_or(0, |s| s.width)
    }

    pub fn dim(&self) -> usize {
        self.scenes.first().map_or(0, |s| s.dim)
    }
}

pub fn encode_dataset(data: &DatasetFile) -> Result<Vec<u8>> {
    let first = data.scenes.first().ok_or_else(|| Error::invalid("cannot write an empty dataset"))?;
    let (h, w, d) = (first.height, first.width, first.dim);
    let mut out = Vec::with_capacity(36 + data.scenes.len() * h * w * (4 * d + 1));
    out.extend_from_slice(b"MEDS");
    put_u32(&mut out, VERSION as usize)?;
    for v in [h, w, data.classes, d, data.scenes.len()] {
        put_u32(&mut out, v)?;
    }
    out.extend_from_slice(&data.seed.to_le_bytes());
    for s in &data.scenes {
        if (s.height, s.width, s.dim) != (h, w, d) {
            return Err(Error::invalid("scenes differ in size or feature width"));
        }
        s.check_labels(data.classes)?;
        for f in &s.features {
            out.extend_from_slice(&f.to_le_bytes());
        }
        out.extend_from_slice(&s.labels);
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<DatasetFile> {
    let fail = |msg: String| Error::format(path, msg);
    let mut r = Reader::new(bytes);
    r.magic(b"MEDS").map_err(fail)?;
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32().map_err(fail)? as usize;
    }
    let [h, w, classes, dim, n] = dims;
    let seed = r.u64().map_err(fail)?;
    let mut scenes = Vec::with_capacity(n);
    for i in 0..n {
        let features = r.f32s(h * w * dim).map_err(fail)?;
        let labels = r.take(h * w).map_err(fail)?.to_vec();
        let s = SceneSample::new(h, w, dim, features, labels).map_err(|e| fail(format!("scene {i}: {e}")))?;
        s.check_labels(classes).map_err(|e| fail(format!("scene {i}: {e}")))?;
        scenes.push(s);
    }
    r.finish().map_err(fail)?;
    Ok(DatasetFile { classes, seed, scenes })
}

pub fn write_dataset(path: &Path, data: &DatasetFile) -> Result<()> {
    write_file(path, &encode_dataset(data)?)
}

pub fn read_dataset(path: &Path) -> Result<DatasetFile> {
    decode_dataset(&read_file(path)?, path)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn named_arrays(model: &TrainedModel) -> Vec<(String, usize, usize, Vec<f64>)> {
    let mut arrays = Vec::new();
    let mut linear = |name: &str, l: &Linear| {
        arrays.push((format!("{name}.weight"), l.out_dim, l.in_dim, l.weight.clone()));
        arrays.push((format!("{name}.bias"), l.out_dim, 1, l.bias.clone()));
    };
    linear("backbone", &model.backbone.layer);
    for (i, e) in model.experts.iter().enumerate() {
        linear(&format!("expert{}.context", i + 1), &e.context);
        linear(&format!("expert{}.head", i + 1), &e.head);
    }
    if let Some(c) = &model.calibration {
        arrays.push(("calibration.w".into(), c.experts, c.classes, c.w.clone()));
        arrays.push(("calibration.beta".into(), c.experts, c.classes, c.beta.clone()));
    }
    arrays
}

pub fn encode_checkpoint(model: &TrainedModel) -> Result<Vec<u8>> {
    model.validate()?;
    let d = &model.dims;
    let g = &model.grouping;
    let arrays = named_arrays(model);
    let mut header = String::new();
    let mut kv = |k: &str, v: String| header.push_str(&format!("{k} = {v}\n"));
    kv("experts", d.experts.to_string());
    kv("input_dim", d.input_dim.to_string());
    kv("hidden", d.hidden.to_string());
    kv("context", d.context.to_string());
    kv("classes", d.classes.to_string());
    kv("window_radius", d.window_radius.to_string());
    kv("mode", model.mode.to_string());
    kv("seed", model.provenance.seed.to_string());
    kv("order", join(&g.order));
    kv("body_start", g.body_start.to_string());
    kv("tail_start", g.tail_start.to_string());
    kv("counts", join(&model.profile.counts));
    kv("calibrated", model.calibration.is_some().to_string());
    for (k, v) in &model.provenance.config {
        kv(&format!("config.{k}"), v.clone());
    }
    let names: Vec<String> = arrays.iter().map(|(n, r, c, _)| format!("{n}:{r}x{c}")).collect();
    kv("arrays", names.join(" "));

    let mut out = Vec::new();
    out.extend_from_slice(b"MEDC");
    put_u32(&mut out, VERSION as usize)?;
    put_u32(&mut out, header.len())?;
    out.extend_from_slice(header.as_bytes());
    for (_, _, _, data) in &arrays {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> std::result::Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected `key = value`", n + 1))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(format!("line {}: empty key", n + 1));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| format!("bad list entry '{x}'"))).collect()
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<TrainedModel> {
    let fail = |msg: String| Error::format(path, msg);
    let mut r = Reader::new(bytes);
    r.magic(b"MEDC").map_err(fail)?;
    let len = r.u32().map_err(fail)? as usize;
    let text = std::str::from_utf8(r.take(len).map_err(fail)?).map_err(|_| fail("header is not UTF-8".into()))?;
    let header: BTreeMap<String, String> = parse_key_values(text).map_err(fail)?.into_iter().collect();
    let get = |k: &str| header.get(k).map(String::as_str).ok_or_else(|| fail(format!("header lacks '{k}'")));
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| fail(format!("bad value for '{k}'"))) };

    let dims = ModelDims {
        input_dim: num("input_dim")?,
        hidden: num("hidden")?,
        context: num("context")?,
        classes: num("classes")?,
        window_radius: num("window_radius")?,
        experts: num("experts")?,
    };
    dims.validate().map_err(|e| fail(e.to_string()))?;
    let mode: TrainMode = get("mode")?.parse().map_err(|e: Error| fail(e.to_string()))?;
    let seed: u64 = get("seed")?.parse().map_err(|_| fail("bad seed".into()))?;
    let order: Vec<usize> = parse_list(get("order")?).map_err(fail)?;
    let grouping = CategoryGrouping::from_order(order, num("body_start")?, num("tail_start")?)
        .map_err(|e| fail(e.to_string()))?;
    let profile = FrequencyProfile::from_counts(parse_list(get("counts")?).map_err(fail)?).map_err(|e| fail(e.to_string()))?;
    let calibrated = match get("calibrated")? {
        "true" => true,
        "false" => false,
        v => return Err(fail(format!("bad value '{v}' for 'calibrated'"))),
    };
    let config: BTreeMap<String, String> =
        header.iter().filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.clone()))).collect();

    let mut arrays: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut shapes: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for entry in get("arrays")?.split_whitespace() {
        let (name, shape) = entry.split_once(':').ok_or_else(|| fail(format!("bad array entry '{entry}'")))?;
        let (rows, cols) = shape
            .split_once('x')
            .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
            .ok_or_else(|| fail(format!("bad array shape '{shape}'")))?;
        let data = r.f64s(rows * cols).map_err(fail)?;
        shapes.insert(name.to_string(), (rows, cols));
        arrays.insert(name.to_string(), data);
    }
    r.finish().map_err(fail)?;

    let mut take = |name: &str, rows: usize, cols: usize| -> Result<Vec<f64>> {
        match shapes.get(name) {
            Some(&s) if s == (rows, cols) => Ok(arrays.remove(name).unwrap()),
            Some(&(r, c)) => Err(fail(format!("array '{name}' is {r}x{c}, expected {rows}x{cols}"))),
            None => Err(fail(format!("missing array '{name}'"))),
        }
    };
    let mut linear = |name: &str, out_dim: usize, in_dim: usize| -> Result<Linear> {
        Ok(Linear {
            out_dim,
            in_dim,
            weight: take(&format!("{name}.weight"), out_dim, in_dim)?,
            bias: take(&format!("{name}.bias"), out_dim, 1)?,
        })
    };
    let backbone = BackboneParams { layer: linear("backbone", dims.hidden, dims.input_dim)? };
    let mut experts = Vec::with_capacity(dims.experts);
    for i in 1..=dims.experts {
        experts.push(ExpertParams {
            context: linear(&format!("expert{i}.context"), dims.context, 2 * dims.hidden)?,
            head: linear(&format!("expert{i}.head"), dims.classes, dims.context)?,
            window_radius: dims.window_radius,
        });
    }
    let calibration = if calibrated {
        Some(CalibrationParams {
            experts: dims.experts,
            classes: dims.classes,
            w: take("calibration.w", dims.experts, dims.classes)?,
            beta: take("calibration.beta", dims.experts, dims.classes)?,
        })
    } else {
        None
    };
    let expert_sets = if dims.experts == 1 { grouping.single_expert_sets() } else { grouping.expert_sets.clone() };
    let model = TrainedModel {
        dims,
        mode,
        backbone,
        experts,
        expert_sets,
        grouping,
        profile,
        calibration,
        provenance: Provenance { seed, config, trace: Vec::new(), moe_trace: Vec::new() },
    };
    model.validate().map_err(|e| fail(e.to_string()))?;
    Ok(model)
}

pub fn write_checkpoint(path: &Path, model: &TrainedModel) -> Result<()> {
    write_file(path, &encode_checkpoint(model)?)
}

pub fn read_checkpoint(path: &Path) -> Result<TrainedModel> {
    decode_checkpoint(&read_file(path)?, path)
}

/// `scenes[s][k]` is expert `k`'s probability grid for scene `s`.
pub fn encode_probabilities(scenes: &[Vec<ProbabilityGrid>]) -> Result<Vec<u8>> {
    let first = scenes.first().and_then(|s| s.first()).ok_or_else(|| Error::invalid("nothing to dump"))?;
    let k = scenes[0].len();
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut out = Vec::new();
    out.extend_from_slice(b"MEDP");
    put_u32(&mut out, VERSION as usize)?;
    for v in [k, scenes.len(), h, w, c] {
        put_u32(&mut out, v)?;
    }
    for scene in scenes {
        if scene.len() != k || scene.iter().any(|g| (g.height, g.width, g.channels) != (h, w, c)) {
            return Err(Error::invalid("probability grids differ in shape"));
        }
        for g in scene {
            for &v in &g.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_probabilities(bytes: &[u8], path: &Path) -> Result<Vec<Vec<ProbabilityGrid>>> {
    let fail = |msg: String| Error::format(path, msg);
    let mut r = Reader::new(bytes);
    r.magic(b"MEDP").map_err(fail)?;
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32().map_err(fail)? as usize;
    }
    let [k, n, h, w, c] = dims;
    let mut scenes = Vec::with_capacity(n);
    for _ in 0..n {
        let mut grids = Vec::with_capacity(k);
        for _ in 0..k {
            let data = r.f32s(h * w * c).map_err(fail)?.into_iter().map(f64::from).collect();
            grids.push(ProbabilityGrid { height: h, width: w, channels: c, data });
        }
        scenes.push(grids);
    }
    r.finish().map_err(fail)?;
    Ok(scenes)
}
