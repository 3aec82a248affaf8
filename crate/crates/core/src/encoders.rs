//! Condition encoders: boxes, map polylines, captions and camera pose become
//! width-`d` token sequences, assembled into foreground/background bundles.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore};
use crate::rng::Prng;
use crate::scene::{caption_vocabulary, BoxSet, CameraModel, CategoryTables, SceneClip, VectorMap};
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourierSpec {
    pub num_frequencies: usize,
    pub base: f64,
}

impl FourierSpec {
    pub fn new(num_frequencies: usize, base: f64) -> Result<Self> {
        if num_frequencies == 0 || !(base > 0.0 && base.is_finite()) {
            return Err(Error::invalid(
                "fourier spec",
                format!("need ≥ 1 frequencies and base > 0, got {num_frequencies}, {base}"),
            ));
        }
        Ok(Self { num_frequencies, base })
    }

    pub fn from_model(m: &ModelConfig) -> Result<Self> {
        Self::new(m.fourier_frequencies, m.fourier_base)
    }

    pub fn width(&self, inputs: usize) -> usize {
        2 * inputs * self.num_frequencies
    }
}

/// `[sin(2ᵏ·base·x), cos(2ᵏ·base·x)]` for each input, then each frequency.
pub fn fourier_embed(x: &[f64], spec: &FourierSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(spec.width(x.len()));
    for &xi in x {
        let mut f = spec.base;
        for _ in 0..spec.num_frequencies {
            let (s, c) = (f * xi).sin_cos();
            out.push(s);
            out.push(c);
            f *= 2.0;
        }
    }
    out
}

/// Row keys of the embedding table: every category code, then every caption
/// token.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    keys: Vec<String>,
}

pub const TABLE_PARAM: &str = "encoders.table";
pub const TEXT_PROJ_PARAM: &str = "encoders.text_proj";
pub const NULL_FG_PARAM: &str = "encoders.null_fg";
pub const NULL_BG_PARAM: &str = "encoders.null_bg";

fn code_key(code: u8) -> String {
    format!("category:{code}")
}

fn token_key(token: &str) -> String {
    format!("token:{token}")
}

impl EmbeddingTable {
    pub fn new(tables: &CategoryTables) -> Self {
        let keys = tables
            .codes()
            .into_iter()
            .map(code_key)
            .chain(caption_vocabulary().iter().map(|t| token_key(t)))
            .collect();
        Self { keys }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    fn row_of(&self, key: &str) -> Option<usize> {
        self.keys.iter().position(|k| k == key)
    }

    pub fn category_row(&self, code: u8) -> Result<usize> {
        self.row_of(&code_key(code)).ok_or(Error::UnknownCategory(code))
    }

    pub fn token_row(&self, token: &str) -> Result<usize> {
        self.row_of(&token_key(token))
            .ok_or_else(|| Error::invalid("caption", format!("token `{token}` is not in the vocabulary")))
    }

    /// Seeded rows; rejects (vanishingly unlikely) duplicate rows so lookups
    /// stay injective.
    pub fn init(&self, store: &mut ParamStore, rng: &mut Prng, d_cat: usize) -> Result<()> {
        let rows = crate::rng::normal_tensor(rng, vec![self.len(), d_cat], 1.0);
        let chunks: Vec<&[f64]> = rows.data().chunks(d_cat).collect();
        for i in 0..chunks.len() {
            if chunks[..i].contains(&chunks[i]) {
                return Err(Error::invalid("embedding table", format!("row {i} duplicates an earlier row")));
            }
        }
        store.insert(TABLE_PARAM, rows);
        Ok(())
    }
}

/// Creates every encoder parameter.
pub fn init_encoders(store: &mut ParamStore, rng: &mut Prng, m: &ModelConfig, tables: &CategoryTables) -> Result<()> {
    let spec = FourierSpec::from_model(m)?;
    let table = EmbeddingTable::new(tables);
    table.init(store, rng, m.d_cat)?;
    store.init_normal(rng, TEXT_PROJ_PARAM, &[m.d_cat, m.d], 1.0 / (m.d_cat as f64).sqrt());
    let obj_in = m.d_cat + spec.width(24);
    for (name, fan_in) in [("box", obj_in), ("map", obj_in), ("cam", spec.width(21))] {
        store.init_linear(rng, &format!("encoders.{name}.0"), fan_in, m.d, 1.0);
        store.init_linear(rng, &format!("encoders.{name}.1"), m.d, m.d, 1.0);
    }
    store.init_normal(rng, NULL_FG_PARAM, &[1, m.d], 1.0);
    store.init_normal(rng, NULL_BG_PARAM, &[1, m.d], 1.0);
    Ok(())
}

fn table_rows<'s>(ctx: &Ctx<'_, 's>) -> Result<&'s Tensor> {
    ctx.store().get(TABLE_PARAM)
}

fn object_tokens<'t>(
    ctx: &Ctx<'t, '_>,
    mlp: &str,
    items: &[(u8, Vec<f64>)],
    table: &EmbeddingTable,
    spec: &FourierSpec,
) -> Result<Var<'t>> {
    let rows = table_rows(ctx)?;
    let d_cat = rows.shape()[1];
    let width = d_cat + spec.width(24);
    let mut data = Vec::with_capacity(items.len() * width);
    for (code, coords) in items {
        let r = table.category_row(*code)?;
        data.extend_from_slice(&rows.data()[r * d_cat..(r + 1) * d_cat]);
        data.extend(fourier_embed(coords, spec));
    }
    let input = ctx.constant_owned(Tensor::new(vec![items.len(), width], data)?)?;
    ctx.mlp(mlp, input)
}

/// One token per box: `MLP_box([embed(t), fourier(corners)])`.
pub fn encode_boxes<'t>(
    ctx: &Ctx<'t, '_>,
    boxes: &BoxSet,
    table: &EmbeddingTable,
    spec: &FourierSpec,
) -> Result<Var<'t>> {
    for b in &boxes.entries {
        b.validate()?;
    }
    let items: Vec<(u8, Vec<f64>)> = boxes.entries.iter().map(|b| (b.category, b.flattened())).collect();
    object_tokens(ctx, "encoders.box", &items, table, spec)
}

/// One token per map element: `MLP_map([embed(t), fourier(points)])`.
pub fn encode_map<'t>(
    ctx: &Ctx<'t, '_>,
    map: &VectorMap,
    table: &EmbeddingTable,
    spec: &FourierSpec,
) -> Result<Var<'t>> {
    let items: Vec<(u8, Vec<f64>)> = map.entries.iter().map(|m| (m.category, m.flattened())).collect();
    object_tokens(ctx, "encoders.map", &items, table, spec)
}

/// Table lookup per token, then the frozen projection to width `d`.
pub fn encode_text<'t>(ctx: &Ctx<'t, '_>, caption: &[String], table: &EmbeddingTable) -> Result<Var<'t>> {
    let rows = table_rows(ctx)?;
    let d_cat = rows.shape()[1];
    let mut data = Vec::with_capacity(caption.len() * d_cat);
    for tok in caption {
        let r = table.token_row(tok)?;
        data.extend_from_slice(&rows.data()[r * d_cat..(r + 1) * d_cat]);
    }
    let looked_up = ctx.constant_owned(Tensor::new(vec![caption.len(), d_cat], data)?)?;
    Ok(looked_up.matmul(ctx.p(TEXT_PROJ_PARAM)?)?)
}

/// `MLP_cam(fourier([K, R, T]))`, a single token.
pub fn encode_camera<'t>(ctx: &Ctx<'t, '_>, cam: &CameraModel, spec: &FourierSpec) -> Result<Var<'t>> {
    cam.validate()?;
    let f = fourier_embed(&cam.flattened(), spec);
    let input = ctx.constant_owned(Tensor::new(vec![1, f.len()], f)?)?;
    ctx.mlp("encoders.cam", input)
}

/// Token sequences of one frame.
#[derive(Debug, Clone, Copy)]
pub struct ConditionBundle<'t> {
    pub boxes: Var<'t>,
    pub map: Var<'t>,
    pub text: Var<'t>,
    pub cam: Var<'t>,
}

pub fn assemble_conditions<'t>(
    boxes: Var<'t>,
    map: Var<'t>,
    text: Var<'t>,
    cam: Var<'t>,
) -> Result<ConditionBundle<'t>> {
    let d = cam.shape()[1];
    for (name, v) in [("box", boxes), ("map", map), ("text", text), ("camera", cam)] {
        let s = v.shape();
        if s.len() != 2 || s[1] != d {
            return Err(Error::invalid(
                "conditions",
                format!("{name} tokens have shape {s:?}, expected [_, {d}]"),
            ));
        }
    }
    Ok(ConditionBundle { boxes, map, text, cam })
}

impl<'t> ConditionBundle<'t> {
    fn cat(&self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        Ok(self.cam.tape().concat(parts, 0)?)
    }

    /// `[c_cam, c_text, c_box]`
    pub fn fg(&self) -> Result<Var<'t>> {
        self.cat(&[self.cam, self.text, self.boxes])
    }

    /// `[c_cam, c_text, c_map]`
    pub fn bg(&self) -> Result<Var<'t>> {
        self.cat(&[self.cam, self.text, self.map])
    }

    /// Spatial context for the foreground gate: `[c_box, c_cam]`.
    pub fn spatial_fg(&self) -> Result<Var<'t>> {
        self.cat(&[self.boxes, self.cam])
    }

    /// Spatial context for the background gate: `[c_map, c_cam]`.
    pub fn spatial_bg(&self) -> Result<Var<'t>> {
        self.cat(&[self.map, self.cam])
    }
}

/// Per-frame condition tokens of a clip, stacked on a leading frame axis.
#[derive(Debug, Clone, Copy)]
pub struct ClipConditions<'t> {
    pub fg: Var<'t>,
    pub bg: Var<'t>,
    pub spatial_fg: Var<'t>,
    pub spatial_bg: Var<'t>,
    /// Caption tokens seen by the base model and the deformable stage.
    pub text: Var<'t>,
}

fn stack<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let lifted = parts
        .iter()
        .map(|v| {
            let mut s = v.shape();
            s.insert(0, 1);
            v.reshape(s)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(parts[0].tape().concat(&lifted, 0)?)
}

impl<'t> ClipConditions<'t> {
    pub fn encode(ctx: &Ctx<'t, '_>, clip: &SceneClip, spec: &FourierSpec) -> Result<Self> {
        let table = EmbeddingTable::new(&clip.categories);
        let map = encode_map(ctx, &clip.map, &table, spec)?;
        let text = encode_text(ctx, &clip.caption, &table)?;
        let mut parts: [Vec<Var<'t>>; 5] = Default::default();
        for frame in &clip.frames {
            let b = assemble_conditions(
                encode_boxes(ctx, &frame.boxes, &table, spec)?,
                map,
                text,
                encode_camera(ctx, &frame.camera, spec)?,
            )?;
            parts[0].push(b.fg()?);
            parts[1].push(b.bg()?);
            parts[2].push(b.spatial_fg()?);
            parts[3].push(b.spatial_bg()?);
            parts[4].push(text);
        }
        Ok(Self {
            fg: stack(&parts[0])?,
            bg: stack(&parts[1])?,
            spatial_fg: stack(&parts[2])?,
            spatial_bg: stack(&parts[3])?,
            text: stack(&parts[4])?,
        })
    }

    /// Learned null tokens in place of every condition; empty caption.
    pub fn null(ctx: &Ctx<'t, '_>, frames: usize) -> Result<Self> {
        let d = ctx.store().get(NULL_FG_PARAM)?.shape()[1];
        let fg = ctx.p(NULL_FG_PARAM)?.reshape(vec![1, 1, d])?.broadcast_to(&[frames, 1, d])?;
        let bg = ctx.p(NULL_BG_PARAM)?.reshape(vec![1, 1, d])?.broadcast_to(&[frames, 1, d])?;
        let text = ctx.constant_owned(Tensor::zeros(vec![frames, 0, d]))?;
        Ok(Self {
            fg,
            bg,
            spatial_fg: fg,
            spatial_bg: bg,
            text,
        })
    }
}
