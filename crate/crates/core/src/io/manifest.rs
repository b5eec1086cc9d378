//! Text model manifests naming the topology, with parameters in a separate
//! little-endian `f32` blob.
//!
//! ```text
//! format 1
//! input 3 128 128
//! blob weights.f32
//! layer conv1 conv in=3 out=8 k=3 stride=1 pad=1 relu=1 weights=0:216 bias=216:8 src=input
//! layer pool1 maxpool size=2 stride=2 ceil=1
//! layer head conv in=8 out=4 k=1 weights=224:32 bias=256:4
//! ```
//!
//! Blob ranges are `offset:count` in elements. `src` defaults to the previous
//! layer (the input for the first); joins list several sources separated by
//! commas. `#` starts a comment.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{blob, content_lines, tokens};
use crate::error::{Error, Result};
use crate::network::{
    build_network, ConvGeometry, ConvWeights, DenseNetwork, LayerDesc, LayerKind, NetworkSpec, Source,
};
use crate::tensor::{PoolSpec, Shape3};

pub const FORMAT_VERSION: u32 = 1;

/// Upper bound on channel counts and spatial sizes.
const MAX_EXTENT: usize = 1 << 16;
/// Upper bound on kernel size, stride and padding.
const MAX_WINDOW: usize = 1 << 10;

/// A run of blob elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlobRange {
    pub offset: usize,
    pub count: usize,
}

impl BlobRange {
    fn end(&self) -> usize {
        self.offset + self.count
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamRanges {
    pub weights: BlobRange,
    pub bias: BlobRange,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelManifest {
    pub spec: NetworkSpec,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    /// One entry per convolution layer, in order.
    pub params: Vec<ParamRanges>,
}

struct Cursor<'a> {
    file: &'a Path,
}

impl Cursor<'_> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::parse(self.file, offset, msg)
    }

    fn number(&self, offset: usize, text: &str, what: &str, max: usize) -> Result<usize> {
        let v: usize = text
            .parse()
            .map_err(|_| self.err(offset, format!("{what}: expected a non-negative integer, got '{text}'")))?;
        if v > max {
            return Err(self.err(offset, format!("{what} {v} exceeds the limit of {max}")));
        }
        Ok(v)
    }

    fn flag(&self, offset: usize, text: &str, what: &str) -> Result<bool> {
        match text {
            "0" | "false" => Ok(false),
            "1" | "true" => Ok(true),
            _ => Err(self.err(offset, format!("{what}: expected 0 or 1, got '{text}'"))),
        }
    }

    fn range(&self, offset: usize, text: &str, what: &str) -> Result<BlobRange> {
        let (a, b) = text
            .split_once(':')
            .ok_or_else(|| self.err(offset, format!("{what}: expected offset:count, got '{text}'")))?;
        let r = BlobRange {
            offset: self.number(offset, a, what, usize::MAX / 4)?,
            count: self.number(offset + a.len() + 1, b, what, usize::MAX / 4)?,
        };
        Ok(r)
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name != "input"
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

/// Parses a manifest. `file` is only used in error messages.
pub fn parse_manifest(text: &str, file: &Path) -> Result<ModelManifest> {
    let cur = Cursor { file };
    let mut lines = content_lines(text).peekable();
    match lines.next() {
        Some((off, line)) => {
            let toks: Vec<_> = tokens(off, line).collect();
            if toks.len() != 2 || toks[0].1 != "format" {
                return Err(cur.err(off, "first line must be 'format <version>'"));
            }
            let v = cur.number(toks[1].0, toks[1].1, "format version", u32::MAX as usize)?;
            if v != FORMAT_VERSION as usize {
                return Err(cur.err(toks[1].0, format!("unsupported format version {v}")));
            }
        }
        None => return Err(cur.err(0, "empty manifest")),
    }

    let mut input: Option<Shape3> = None;
    let mut blob_name: Option<String> = None;
    let mut layers: Vec<LayerDesc> = Vec::new();
    let mut params: Vec<(ParamRanges, usize)> = Vec::new();
    let mut names: HashMap<String, usize> = HashMap::new();

    for (off, line) in lines {
        let toks: Vec<(usize, &str)> = tokens(off, line).collect();
        match toks[0].1 {
            "input" => {
                if input.is_some() {
                    return Err(cur.err(off, "duplicate 'input' line"));
                }
                if toks.len() != 4 {
                    return Err(cur.err(off, "expected 'input <channels> <height> <width>'"));
                }
                let d: Vec<usize> = toks[1..]
                    .iter()
                    .map(|(o, t)| cur.number(*o, t, "input extent", MAX_EXTENT))
                    .collect::<Result<_>>()?;
                if d.contains(&0) {
                    return Err(cur.err(off, "input extents must be positive"));
                }
                input = Some(Shape3::new(d[0], d[1], d[2]));
            }
            "blob" => {
                if blob_name.is_some() {
                    return Err(cur.err(off, "duplicate 'blob' line"));
                }
                if toks.len() != 2 {
                    return Err(cur.err(off, "expected 'blob <file>'"));
                }
                blob_name = Some(toks[1].1.to_string());
            }
            "layer" => {
                if toks.len() < 3 {
                    return Err(cur.err(off, "expected 'layer <name> <kind> key=value...'"));
                }
                let (name_off, name) = toks[1];
                if !valid_name(name) {
                    return Err(cur.err(name_off, format!("invalid layer name '{name}'")));
                }
                if names.contains_key(name) {
                    return Err(cur.err(name_off, format!("duplicate layer name '{name}'")));
                }
                let mut kv: HashMap<&str, (usize, &str)> = HashMap::new();
                for &(o, t) in &toks[3..] {
                    let (k, v) = t
                        .split_once('=')
                        .ok_or_else(|| cur.err(o, format!("expected key=value, got '{t}'")))?;
                    if kv.insert(k, (o + k.len() + 1, v)).is_some() {
                        return Err(cur.err(o, format!("duplicate key '{k}'")));
                    }
                }
                let (kind_off, kind_name) = toks[2];
                let allowed: &[&str] = match kind_name {
                    "conv" => &[
                        "in", "out", "k", "kh", "kw", "stride", "pad", "relu", "weights", "bias", "src",
                    ],
                    "maxpool" => &["size", "stride", "ceil", "src"],
                    "relu" | "add" | "concat" => &["src"],
                    other => return Err(cur.err(kind_off, format!("unknown layer kind '{other}'"))),
                };
                for &(o, t) in &toks[3..] {
                    let k = t.split('=').next().unwrap_or("");
                    if !allowed.contains(&k) {
                        return Err(cur.err(o, format!("unknown key '{k}' for {kind_name}")));
                    }
                }
                let req = |key: &str| {
                    kv.get(key)
                        .copied()
                        .ok_or_else(|| cur.err(kind_off, format!("missing '{key}'")))
                };
                let opt_num = |key: &str, default: usize, max: usize| match kv.get(key) {
                    Some(&(o, v)) => cur.number(o, v, key, max),
                    None => Ok(default),
                };
                let opt_flag = |key: &str| match kv.get(key) {
                    Some(&(o, v)) => cur.flag(o, v, key),
                    None => Ok(false),
                };

                let kind = match kind_name {
                    "conv" => {
                        let (o, v) = req("in")?;
                        let in_channels = cur.number(o, v, "in", MAX_EXTENT)?;
                        let (o, v) = req("out")?;
                        let out_channels = cur.number(o, v, "out", MAX_EXTENT)?;
                        let k = opt_num("k", 0, MAX_WINDOW)?;
                        let kernel_h = opt_num("kh", k, MAX_WINDOW)?;
                        let kernel_w = opt_num("kw", k, MAX_WINDOW)?;
                        if kernel_h == 0 || kernel_w == 0 {
                            return Err(cur.err(kind_off, "kernel size missing or zero"));
                        }
                        let stride = opt_num("stride", 1, MAX_WINDOW)?;
                        if stride == 0 {
                            return Err(cur.err(kv["stride"].0, "stride must be positive"));
                        }
                        if in_channels == 0 || out_channels == 0 {
                            return Err(cur.err(kind_off, "channel counts must be positive"));
                        }
                        let g = ConvGeometry {
                            in_channels,
                            out_channels,
                            kernel_h,
                            kernel_w,
                            stride,
                            padding: opt_num("pad", 0, MAX_WINDOW)?,
                            fuse_relu: opt_flag("relu")?,
                        };
                        let (wo, wv) = req("weights")?;
                        let weights = cur.range(wo, wv, "weights")?;
                        if weights.count != g.weight_len() {
                            return Err(cur.err(
                                wo,
                                format!("weights: expected {} values, got {}", g.weight_len(), weights.count),
                            ));
                        }
                        let (bo, bv) = req("bias")?;
                        let bias = cur.range(bo, bv, "bias")?;
                        if bias.count != out_channels {
                            return Err(
                                cur.err(bo, format!("bias: expected {out_channels} values, got {}", bias.count))
                            );
                        }
                        params.push((ParamRanges { weights, bias }, wo));
                        LayerKind::Conv(g)
                    }
                    "maxpool" => {
                        let (o, v) = req("size")?;
                        let size = cur.number(o, v, "size", MAX_WINDOW)?;
                        let stride = opt_num("stride", size, MAX_WINDOW)?;
                        if size == 0 || stride == 0 {
                            return Err(cur.err(kind_off, "pool size and stride must be positive"));
                        }
                        LayerKind::MaxPool(PoolSpec {
                            size,
                            stride,
                            ceil_mode: opt_flag("ceil")?,
                        })
                    }
                    "relu" => LayerKind::Relu,
                    "add" => LayerKind::Add,
                    _ => LayerKind::Concat,
                };

                let inputs = match kv.get("src") {
                    Some(&(o, v)) => {
                        let mut srcs = Vec::new();
                        let mut at = o;
                        for s in v.split(',') {
                            srcs.push(match s {
                                "input" => Source::Input,
                                _ => Source::Layer(
                                    *names
                                        .get(s)
                                        .ok_or_else(|| cur.err(at, format!("unknown source layer '{s}'")))?,
                                ),
                            });
                            at += s.len() + 1;
                        }
                        srcs
                    }
                    None if layers.is_empty() => vec![Source::Input],
                    None => vec![Source::Layer(layers.len() - 1)],
                };
                names.insert(name.to_string(), layers.len());
                layers.push(LayerDesc {
                    name: name.to_string(),
                    kind,
                    inputs,
                });
            }
            other => return Err(cur.err(off, format!("unknown directive '{other}'"))),
        }
    }

    let input = input.ok_or_else(|| cur.err(text.len(), "missing 'input' line"))?;
    let blob = blob_name.ok_or_else(|| cur.err(text.len(), "missing 'blob' line"))?;
    if layers.is_empty() {
        return Err(cur.err(text.len(), "no layers"));
    }

    // Blob ranges must not overlap.
    let mut spans: Vec<(BlobRange, usize)> = params
        .iter()
        .flat_map(|(p, o)| [(p.weights, *o), (p.bias, *o)])
        .filter(|(r, _)| r.count > 0)
        .collect();
    spans.sort_by_key(|(r, _)| r.offset);
    for w in spans.windows(2) {
        if w[1].0.offset < w[0].0.end() {
            return Err(cur.err(w[1].1, "blob range overlaps another layer's parameters"));
        }
    }

    let spec = NetworkSpec { input, layers };
    spec.shapes()?;
    Ok(ModelManifest {
        spec,
        blob,
        params: params.into_iter().map(|(p, _)| p).collect(),
    })
}

impl ModelManifest {
    /// Manifest for `spec` with parameters packed back to back, weights
    /// before bias, in layer order.
    pub fn contiguous(spec: &NetworkSpec, blob: &str) -> Self {
        let mut offset = 0;
        let params = spec
            .conv_layers()
            .iter()
            .map(|&i| {
                let LayerKind::Conv(g) = &spec.layers[i].kind else {
                    unreachable!()
                };
                let weights = BlobRange {
                    offset,
                    count: g.weight_len(),
                };
                offset += g.weight_len();
                let bias = BlobRange {
                    offset,
                    count: g.out_channels,
                };
                offset += g.out_channels;
                ParamRanges { weights, bias }
            })
            .collect();
        ModelManifest {
            spec: spec.clone(),
            blob: blob.to_string(),
            params,
        }
    }

    /// Number of blob elements the manifest refers to.
    pub fn blob_len(&self) -> usize {
        self.params
            .iter()
            .map(|p| p.weights.end().max(p.bias.end()))
            .max()
            .unwrap_or(0)
    }

    /// Binds the blob's values to the topology.
    pub fn bind(&self, values: &[f32], blob_path: &Path) -> Result<DenseNetwork> {
        let need = self.blob_len();
        if values.len() < need {
            return Err(Error::parse(
                blob_path,
                values.len() * 4,
                format!("blob holds {} values, manifest needs {need}", values.len()),
            ));
        }
        let weights = self
            .params
            .iter()
            .map(|p| ConvWeights {
                weights: values[p.weights.offset..p.weights.end()].to_vec(),
                bias: values[p.bias.offset..p.bias.end()].to_vec(),
            })
            .collect();
        build_network(&self.spec, weights)
    }

    /// Blob contents for `net` under this manifest's ranges.
    pub fn pack(&self, net: &DenseNetwork) -> Result<Vec<f32>> {
        let weights = net.conv_weights();
        if weights.len() != self.params.len() {
            return Err(Error::config("network does not match manifest"));
        }
        let mut out = vec![0.0; self.blob_len()];
        for (p, w) in self.params.iter().zip(&weights) {
            if w.weights.len() != p.weights.count || w.bias.len() != p.bias.count {
                return Err(Error::config("network parameters do not match manifest ranges"));
            }
            out[p.weights.offset..p.weights.end()].copy_from_slice(&w.weights);
            out[p.bias.offset..p.bias.end()].copy_from_slice(&w.bias);
        }
        Ok(out)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let i = self.spec.input;
        let _ = writeln!(s, "format {FORMAT_VERSION}");
        let _ = writeln!(s, "input {} {} {}", i.channels, i.height, i.width);
        let _ = writeln!(s, "blob {}", self.blob);
        let mut params = self.params.iter();
        for layer in &self.spec.layers {
            let _ = write!(s, "layer {} {}", layer.name, layer.kind.as_str());
            match &layer.kind {
                LayerKind::Conv(g) => {
                    let p = params.next().expect("one range per conv layer");
                    let _ = write!(s, " in={} out={}", g.in_channels, g.out_channels);
                    if g.kernel_h == g.kernel_w {
                        let _ = write!(s, " k={}", g.kernel_h);
                    } else {
                        let _ = write!(s, " kh={} kw={}", g.kernel_h, g.kernel_w);
                    }
                    let _ = write!(
                        s,
                        " stride={} pad={} relu={} weights={}:{} bias={}:{}",
                        g.stride,
                        g.padding,
                        u8::from(g.fuse_relu),
                        p.weights.offset,
                        p.weights.count,
                        p.bias.offset,
                        p.bias.count
                    );
                }
                LayerKind::MaxPool(p) => {
                    let _ = write!(s, " size={} stride={} ceil={}", p.size, p.stride, u8::from(p.ceil_mode));
                }
                _ => {}
            }
            let srcs: Vec<&str> = layer
                .inputs
                .iter()
                .map(|src| match *src {
                    Source::Input => "input",
                    Source::Layer(j) => self.spec.layers[j].name.as_str(),
                })
                .collect();
            let _ = writeln!(s, " src={}", srcs.join(","));
        }
        s
    }
}

/// Reads a manifest and its blob.
pub fn load_model(path: &Path) -> Result<DenseNetwork> {
    let manifest = parse_manifest(&super::read_text(path)?, path)?;
    let blob_path = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    manifest.bind(&blob::read_blob(&blob_path)?, &blob_path)
}

/// Writes `net` as a manifest at `path` plus a contiguous blob named
/// `blob_name` next to it.
pub fn save_model(path: &Path, net: &DenseNetwork, blob_name: &str) -> Result<()> {
    let manifest = ModelManifest::contiguous(net.spec(), blob_name);
    let blob_path = path.parent().unwrap_or(Path::new(".")).join(blob_name);
    blob::write_blob(&blob_path, &manifest.pack(net)?)?;
    super::write_atomic(path, manifest.render().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "\
format 1
input 2 8 8
blob w.f32
layer c1 conv in=2 out=3 k=3 pad=1 relu=1 weights=0:54 bias=54:3
layer p1 maxpool size=2 ceil=1
layer c2 conv in=3 out=2 k=1 weights=57:6 bias=63:2  # head
";

    fn parse(text: &str) -> Result<ModelManifest> {
        parse_manifest(text, Path::new("m.txt"))
    }

    fn offset_of(text: &str) -> usize {
        match parse(text) {
            Err(Error::Parse { offset, .. }) => offset,
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn parses_and_renders_round_trip() {
        let m = parse(SMALL).unwrap();
        assert_eq!(m.spec.layers.len(), 3);
        assert_eq!(m.spec.layers[1].inputs, vec![Source::Layer(0)]);
        assert_eq!(m.blob_len(), 65);
        assert_eq!(parse(&m.render()).unwrap(), m);
        assert_eq!(ModelManifest::contiguous(&m.spec, "w.f32"), m);
    }

    #[test]
    fn errors_point_at_the_offending_token() {
        let bad = SMALL.replace("format 1", "format 2");
        assert_eq!(offset_of(&bad), 7);
        let bad = SMALL.replace("weights=57:6", "weights=57:7");
        assert_eq!(offset_of(&bad), bad.find("57:7").unwrap());
        let bad = SMALL.replace("ceil=1", "ceil=yes");
        assert_eq!(offset_of(&bad), bad.find("yes").unwrap());
        let bad = SMALL.replace("bias=63:2", "bias=50:2");
        assert_eq!(offset_of(&bad), bad.find("weights=57").unwrap() + 8);
        let bad = format!("{SMALL}layer x relu src=nope\n");
        assert_eq!(offset_of(&bad), bad.find("nope").unwrap());
        assert_eq!(offset_of(""), 0);
    }

    #[test]
    fn dimension_errors_name_the_layer() {
        let bad = SMALL.replace(
            "in=3 out=2 k=1 weights=57:6 bias=63:2",
            "in=4 out=2 k=1 weights=57:8 bias=65:2",
        );
        match parse(&bad) {
            Err(Error::Dimension { name, .. }) => assert_eq!(name, "c2"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn short_blob_is_rejected() {
        let m = parse(SMALL).unwrap();
        assert!(matches!(
            m.bind(&[0.0; 64], Path::new("w.f32")),
            Err(Error::Parse { offset: 256, .. })
        ));
        assert!(m.bind(&[0.0; 65], Path::new("w.f32")).is_ok());
    }

    #[test]
    fn save_then_load_is_bit_identical() {
        let m = parse(SMALL).unwrap();
        let values: Vec<f32> = (0..65).map(|i| (i as f32 * 0.37).sin()).collect();
        let net = m.bind(&values, Path::new("w.f32")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.txt");
        save_model(&path, &net, "w.f32").unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.spec(), net.spec());
        assert_eq!(back.conv_weights(), net.conv_weights());
        assert_eq!(std::fs::read_to_string(&path).unwrap(), m.render());
    }
}
