//! Checkpoints: a directory of NFAT tensor files plus a plain-text manifest
//! listing parameter names, shapes and the model configuration.

use std::fs;
use std::path::Path;

use super::{ModelConfig, NfaVit};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor};

fn fmt_list(v: &[usize]) -> String {
    v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list4(s: &str, key: &str) -> Result<[usize; 4]> {
    let vals: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad list for {key}: {s}")))?;
    if vals.len() != 4 {
        return Err(Error::Config(format!("{key} needs 4 entries, got {s}")));
    }
    Ok([vals[0], vals[1], vals[2], vals[3]])
}

impl ModelConfig {
    /// key = value lines, one per field.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("image_dims = {}\n", fmt_list(&self.image_dims)));
        s.push_str(&format!("image_depths = {}\n", fmt_list(&self.image_depths)));
        s.push_str(&format!("noise_dims = {}\n", fmt_list(&self.noise_dims)));
        s.push_str(&format!("noise_depths = {}\n", fmt_list(&self.noise_depths)));
        s.push_str(&format!("heads = {}\n", fmt_list(&self.heads)));
        s.push_str(&format!("sparse_strides = {}\n", fmt_list(&self.sparse_strides)));
        s.push_str(&format!("patch_strides = {}\n", fmt_list(&self.patch_strides)));
        s.push_str(&format!("mlp_ratio = {}\n", self.mlp_ratio));
        s.push_str(&format!("decoder_dim = {}\n", self.decoder_dim));
        s.push_str(&format!("cls_hidden = {}\n", self.cls_hidden));
        s.push_str(&format!("cls_kernel = {}\n", self.cls_kernel));
        s.push_str(&format!("top_k_ratio = {}\n", self.top_k_ratio));
        s.push_str(&format!("use_noise = {}\n", self.use_noise));
        s.push_str(&format!("use_naa = {}\n", self.use_naa));
        s.push_str(&format!("weighted_decoder = {}\n", self.weighted_decoder));
        s.push_str(&format!("naa_post_softmax = {}\n", self.naa_post_softmax));
        s
    }

    /// Parse the key = value form produced by [`ModelConfig::to_kv`].
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::toy_default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad config line: {line}")))?;
            let (key, value) = (key.trim(), value.trim());
            let parse_usize = || {
                value
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad value for {key}: {value}")))
            };
            let parse_bool = || {
                value
                    .parse::<bool>()
                    .map_err(|_| Error::Config(format!("bad value for {key}: {value}")))
            };
            match key {
                "image_dims" => cfg.image_dims = parse_list4(value, key)?,
                "image_depths" => cfg.image_depths = parse_list4(value, key)?,
                "noise_dims" => cfg.noise_dims = parse_list4(value, key)?,
                "noise_depths" => cfg.noise_depths = parse_list4(value, key)?,
                "heads" => cfg.heads = parse_list4(value, key)?,
                "sparse_strides" => cfg.sparse_strides = parse_list4(value, key)?,
                "patch_strides" => cfg.patch_strides = parse_list4(value, key)?,
                "mlp_ratio" => cfg.mlp_ratio = parse_usize()?,
                "decoder_dim" => cfg.decoder_dim = parse_usize()?,
                "cls_hidden" => cfg.cls_hidden = parse_usize()?,
                "cls_kernel" => cfg.cls_kernel = parse_usize()?,
                "top_k_ratio" => {
                    cfg.top_k_ratio = value
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad value for {key}: {value}")))?
                }
                "use_noise" => cfg.use_noise = parse_bool()?,
                "use_naa" => cfg.use_naa = parse_bool()?,
                "weighted_decoder" => cfg.weighted_decoder = parse_bool()?,
                "naa_post_softmax" => cfg.naa_post_softmax = parse_bool()?,
                other => return Err(Error::Config(format!("unknown config key {other}"))),
            }
        }
        Ok(cfg)
    }
}

/// Write every parameter as `params/NNNNN.nfat` plus `manifest.txt`.
pub fn save_checkpoint(model: &NfaVit, dir: &Path) -> Result<()> {
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir).map_err(|e| Error::io(params_dir.display().to_string(), e))?;
    let mut manifest = String::new();
    manifest.push_str("# config\n");
    manifest.push_str(&model.config.to_kv());
    manifest.push_str("# params\n");
    for (i, p) in model.params.iter().enumerate() {
        let file = format!("params/{i:05}.nfat");
        write_tensor(&dir.join(&file), &p.value)?;
        manifest.push_str(&format!(
            "{i:05} {} {}\n",
            p.name,
            fmt_list(p.value.shape())
        ));
    }
    let mpath = dir.join("manifest.txt");
    fs::write(&mpath, manifest).map_err(|e| Error::io(mpath.display().to_string(), e))
}

/// Rebuild a model from a checkpoint directory; the manifest's config block
/// decides the architecture and every tensor must match its declared shape.
pub fn load_checkpoint(dir: &Path) -> Result<NfaVit> {
    let mpath = dir.join("manifest.txt");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let (config_part, params_part) = text
        .split_once("# params\n")
        .ok_or_else(|| Error::format(mpath.display().to_string(), "missing # params section"))?;
    let config_part = config_part
        .strip_prefix("# config\n")
        .ok_or_else(|| Error::format(mpath.display().to_string(), "missing # config section"))?;
    let config = ModelConfig::from_kv(config_part)?;
    let mut model = NfaVit::new(config, 0)?;

    let mut listed = 0usize;
    for line in params_part.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (idx, name, shape) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(Error::format(mpath.display().to_string(), format!("bad line: {line}"))),
        };
        let idx: usize = idx
            .parse()
            .map_err(|_| Error::format(mpath.display().to_string(), format!("bad index: {line}")))?;
        if idx >= model.params.len() {
            return Err(Error::format(
                mpath.display().to_string(),
                format!("parameter index {idx} out of range"),
            ));
        }
        let t = read_tensor(&dir.join(format!("params/{idx:05}.nfat")))?;
        let p = model.params.get_mut(crate::tensor::ParamId(idx));
        if p.name != name {
            return Err(Error::format(
                mpath.display().to_string(),
                format!("parameter {idx} is {} in the model but {name} on disk", p.name),
            ));
        }
        let declared = fmt_list(t.shape());
        if declared != shape || p.value.shape() != t.shape() {
            return Err(Error::format(
                mpath.display().to_string(),
                format!("shape mismatch for {name}: model {:?}, file {declared}", p.value.shape()),
            ));
        }
        p.value = t;
        listed += 1;
    }
    if listed != model.params.len() {
        return Err(Error::format(
            mpath.display().to_string(),
            format!("{listed} tensors on disk for {} parameters", model.params.len()),
        ));
    }
    Ok(model)
}
