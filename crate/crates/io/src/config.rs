//! `key=value` configuration files.
//!
//! Blank lines and lines starting with `#` are skipped. `preset` selects the
//! starting point (`desk` by default) wherever it appears; every other key
//! overrides one field. `ablate.<part>=true` switches a component off, or
//! for `randcoord` randomizes the training patch centres.

use std::path::Path;

use comma_core::cam::CoordMode;
use comma_core::coords::CropMode;
use comma_core::model::CommaConfig;

use crate::error::{self, IoError, Result};

/// Parsed lines as `(line number, key, value)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues(Vec<(usize, String, String)>);

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            let (k, v) = s.split_once('=').ok_or_else(|| IoError::Parse { line, msg: format!("expected key=value, found `{s}`") })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(IoError::Parse { line, msg: "empty key".into() });
            }
            if let Some((first, ..)) = out.iter().find(|(_, key, _)| key == k) {
                return Err(IoError::Parse { line, msg: format!("`{k}` already set on line {first}") });
            }
            out.push((line, k.to_string(), v.to_string()));
        }
        Ok(Self(out))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &str, &str)> {
        self.0.iter().map(|(l, k, v)| (*l, k.as_str(), v.as_str()))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.iter().find(|(_, k, _)| *k == key).map(|(_, _, v)| v)
    }
}

pub fn preset(name: &str) -> Option<CommaConfig> {
    match name {
        "paper" => Some(CommaConfig::paper()),
        "desk" => Some(CommaConfig::desk()),
        "toy" => Some(CommaConfig::toy()),
        _ => None,
    }
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| format!("`{v}`: {e}"))
}

fn list<const N: usize>(v: &str) -> Result<[usize; N], String> {
    let items = v.split(',').map(|s| num(s.trim())).collect::<Result<Vec<usize>, _>>()?;
    items.try_into().map_err(|items: Vec<usize>| format!("expected {N} values, found {}", items.len()))
}

fn flag(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("`{v}` is not a boolean")),
    }
}

/// Sets one field. Fails on unknown keys and malformed values.
pub fn apply(cfg: &mut CommaConfig, key: &str, value: &str) -> Result<(), String> {
    match key {
        "preset" => *cfg = preset(value).ok_or_else(|| format!("unknown preset `{value}`"))?,
        "patch_shape" => cfg.patch_shape = list(value)?,
        "global_resize" => cfg.global_resize = list(value)?,
        "base_channels" => cfg.base_channels = num(value)?,
        "stage_channels" => cfg.stage_channels = list(value)?,
        "stem_channels" => cfg.stem_channels = list(value)?,
        "local_token_sizes" => cfg.local_token_sizes = list(value)?,
        "global_token_size" => cfg.global_token_size = num(value)?,
        "token_dim" => cfg.token_dim = num(value)?,
        "mamba_layers" => cfg.mamba_layers = num(value)?,
        "bidirectional" => cfg.bidirectional = flag(value)?,
        "lambda" => cfg.lambda = num(value)?,
        "iterations" => cfg.iterations = num(value)?,
        "batch_size" => cfg.batch_size = num(value)?,
        "lr" => cfg.lr = num(value)?,
        "momentum" => cfg.momentum = num(value)?,
        "poly_power" => cfg.poly_power = num(value)?,
        "grad_clip" => cfg.grad_clip = num(value)?,
        "foreground_fraction" => cfg.foreground_fraction = num(value)?,
        "overlap" => cfg.overlap = num(value)?,
        "attention_softmax" => cfg.attention_softmax = flag(value)?,
        "coord_mode" => {
            cfg.coord_mode = match value {
                "footprint" => CoordMode::Footprint,
                "literal" => CoordMode::Literal,
                _ => return Err(format!("unknown coord mode `{value}`")),
            }
        }
        "crop_mode" => {
            cfg.crop_mode = match value {
                "footprint" => CropMode::Footprint,
                "literal" => CropMode::Literal,
                _ => return Err(format!("unknown crop mode `{value}`")),
            }
        }
        "ablate.lfe" => cfg.ablation.lfe = !flag(value)?,
        "ablate.glf" => cfg.ablation.glf = !flag(value)?,
        "ablate.gloss" => cfg.ablation.global_loss = !flag(value)?,
        "ablate.randcoord" => cfg.ablation.randomize_coords = flag(value)?,
        "seed" => cfg.seed = num(value)?,
        "val_every" => cfg.val_every = num(value)?,
        "checkpoint_every" => cfg.checkpoint_every = num(value)?,
        "target_dice" => cfg.target_dice = if value == "none" { None } else { Some(num(value)?) },
        _ => return Err(format!("unknown key `{key}`")),
    }
    Ok(())
}

/// Applies `kv` to `base`, the `preset` line first.
pub fn apply_all(base: CommaConfig, kv: &KeyValues) -> Result<CommaConfig> {
    let mut cfg = base;
    let ordered = kv.iter().filter(|(_, k, _)| *k == "preset").chain(kv.iter().filter(|(_, k, _)| *k != "preset"));
    for (line, k, v) in ordered {
        apply(&mut cfg, k, v).map_err(|msg| IoError::Parse { line, msg })?;
    }
    Ok(cfg)
}

pub fn parse(text: &str) -> Result<CommaConfig> {
    let cfg = apply_all(CommaConfig::desk(), &KeyValues::parse(text)?)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn read(path: &Path) -> Result<CommaConfig> {
    let text = String::from_utf8(error::read(path)?).map_err(|e| IoError::Usage(format!("not UTF-8: {e}")).in_file(path))?;
    parse(&text).map_err(|e| e.in_file(path))
}

fn join<const N: usize>(v: [usize; N]) -> String {
    v.map(|x| x.to_string()).join(",")
}

fn mode(footprint: bool) -> &'static str {
    if footprint {
        "footprint"
    } else {
        "literal"
    }
}

/// Every field, one per line; [`parse`] restores the same configuration.
pub fn to_string(cfg: &CommaConfig) -> String {
    let a = &cfg.ablation;
    let lines = [
        ("patch_shape", join(cfg.patch_shape)),
        ("global_resize", join(cfg.global_resize)),
        ("base_channels", cfg.base_channels.to_string()),
        ("stage_channels", join(cfg.stage_channels)),
        ("stem_channels", join(cfg.stem_channels)),
        ("local_token_sizes", join(cfg.local_token_sizes)),
        ("global_token_size", cfg.global_token_size.to_string()),
        ("token_dim", cfg.token_dim.to_string()),
        ("mamba_layers", cfg.mamba_layers.to_string()),
        ("bidirectional", cfg.bidirectional.to_string()),
        ("lambda", cfg.lambda.to_string()),
        ("iterations", cfg.iterations.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("lr", cfg.lr.to_string()),
        ("momentum", cfg.momentum.to_string()),
        ("poly_power", cfg.poly_power.to_string()),
        ("grad_clip", cfg.grad_clip.to_string()),
        ("foreground_fraction", cfg.foreground_fraction.to_string()),
        ("overlap", cfg.overlap.to_string()),
        ("attention_softmax", cfg.attention_softmax.to_string()),
        ("coord_mode", mode(cfg.coord_mode == CoordMode::Footprint).to_string()),
        ("crop_mode", mode(cfg.crop_mode == CropMode::Footprint).to_string()),
        ("ablate.lfe", (!a.lfe).to_string()),
        ("ablate.glf", (!a.glf).to_string()),
        ("ablate.gloss", (!a.global_loss).to_string()),
        ("ablate.randcoord", a.randomize_coords.to_string()),
        ("seed", cfg.seed.to_string()),
        ("val_every", cfg.val_every.to_string()),
        ("checkpoint_every", cfg.checkpoint_every.to_string()),
        ("target_dice", cfg.target_dice.map_or("none".to_string(), |d| d.to_string())),
    ];
    lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}
