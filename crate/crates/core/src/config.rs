//! Experiment configuration files.
//!
//! The format is line based: `[section]` headers, `key = value` pairs and
//! `#` comments. Lists are comma separated and extents are written `HxW`.
//! Unknown sections and keys are errors reported with their line number.

use std::collections::BTreeMap;
use std::fmt::{self, Display, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use crate::backbone::{default_taps, BackboneConfig, PRITHVI_BANDS};
use crate::data::splits::{Quotas, SplitRatios};
use crate::data::synth::SyntheticConfig;
use crate::decoder::{DecoderConfig, DecoderKind};
use crate::model::{ModelConfig, PeftConfig};
use crate::peft::{FreezePolicy, LoraConfig, LoraTarget, VitAdapterConfig, VptConfig};
use crate::train::experiments::LrSearchConfig;
use crate::train::RunConfig;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: unknown key '{key}' in [{section}]")]
    UnknownKey { line: usize, section: String, key: String },
    #[error("line {line}: bad value for '{key}': {msg}")]
    Value { line: usize, key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub value: String,
    pub line: usize,
}

/// Raw parsed file: section → key → value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IniDoc {
    pub sections: BTreeMap<String, (usize, BTreeMap<String, Entry>)>,
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

pub fn parse_ini(text: &str) -> Result<IniDoc, ConfigError> {
    let mut doc = IniDoc::default();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.split('#').next().unwrap_or("").trim();
        if s.is_empty() {
            continue;
        }
        let syntax = |msg: &str| ConfigError::Syntax { line, msg: msg.into() };
        if let Some(rest) = s.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| syntax("unterminated section header"))?.trim();
            if !is_ident(name) {
                return Err(syntax("section names use letters, digits, '_' and '-'"));
            }
            if doc.sections.contains_key(name) {
                return Err(syntax(&format!("section [{name}] repeated")));
            }
            doc.sections.insert(name.to_string(), (line, BTreeMap::new()));
            current = Some(name.to_string());
            continue;
        }
        let (k, v) = s.split_once('=').ok_or_else(|| syntax("expected 'key = value'"))?;
        let (k, v) = (k.trim(), v.trim());
        if !is_ident(k) {
            return Err(syntax("keys use letters, digits, '_' and '-'"));
        }
        let section = current.as_ref().ok_or_else(|| syntax("key outside of any section"))?;
        let map = &mut doc.sections.get_mut(section).expect("inserted").1;
        if map.contains_key(k) {
            return Err(syntax(&format!("key '{k}' repeated")));
        }
        map.insert(k.to_string(), Entry { value: v.to_string(), line });
    }
    Ok(doc)
}

/// Pulls typed values out of one section and remembers which keys were used.
struct Reader<'a> {
    name: &'a str,
    entries: BTreeMap<String, Entry>,
}

impl<'a> Reader<'a> {
    fn new(doc: &mut IniDoc, name: &'a str) -> Self {
        let entries = doc.sections.remove(name).map(|(_, m)| m).unwrap_or_default();
        Self { name, entries }
    }

    fn raw(&mut self, key: &str) -> Option<Entry> {
        self.entries.remove(key)
    }

    fn parse<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).map_err(|err| ConfigError::Value { line: e.line, key: key.into(), msg: err.to_string() }),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<(), ConfigError>
    where
        T::Err: Display,
    {
        if let Some(v) = self.parse(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: Display,
    {
        let Some(e) = self.raw(key) else { return Ok(None) };
        if e.value.is_empty() || e.value == "none" {
            return Ok(Some(Vec::new()));
        }
        e.value
            .split(',')
            .map(|p| p.trim().parse::<T>().map_err(|err| ConfigError::Value { line: e.line, key: key.into(), msg: err.to_string() }))
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    fn extent(&mut self, key: &str) -> Result<Option<(usize, usize)>, ConfigError> {
        let Some(e) = self.raw(key) else { return Ok(None) };
        let err = || ConfigError::Value { line: e.line, key: key.into(), msg: "expected HxW".into() };
        let (h, w) = e.value.split_once('x').ok_or_else(err)?;
        Ok(Some((h.trim().parse().map_err(|_| err())?, w.trim().parse().map_err(|_| err())?)))
    }

    fn pair(&mut self, key: &str) -> Result<Option<(f64, f64)>, ConfigError> {
        let Some(e) = self.raw(key) else { return Ok(None) };
        let err = || ConfigError::Value { line: e.line, key: key.into(), msg: "expected 'a, b'".into() };
        let (a, b) = e.value.split_once(',').ok_or_else(err)?;
        Ok(Some((a.trim().parse().map_err(|_| err())?, b.trim().parse().map_err(|_| err())?)))
    }

    fn optional_path(&mut self, key: &str) -> Option<Option<PathBuf>> {
        self.raw(key).map(|e| (!e.value.is_empty() && e.value != "none").then(|| PathBuf::from(e.value)))
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.entries.into_iter().next() {
            Some((key, e)) => Err(ConfigError::UnknownKey { line: e.line, section: self.name.into(), key }),
            None => Ok(()),
        }
    }
}

/// Data-split settings for the `split` command.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSettings {
    pub mode: SplitMode,
    pub buffer_km: f64,
    pub ratios: SplitRatios,
    pub quotas: Quotas,
    pub excluded_regions: Vec<String>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    Buffered,
    Balanced,
}

impl FromStr for SplitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "buffered" => Ok(SplitMode::Buffered),
            "balanced" => Ok(SplitMode::Balanced),
            _ => Err(format!("unknown split mode '{s}'")),
        }
    }
}

impl Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::Buffered => "buffered",
            SplitMode::Balanced => "balanced",
        })
    }
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self {
            mode: SplitMode::Buffered,
            buffer_km: 5.0,
            ratios: SplitRatios::default(),
            quotas: Quotas::default(),
            excluded_regions: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub manifest: Option<PathBuf>,
    pub run: RunConfig,
    pub search: LrSearchConfig,
    pub seeds: Vec<u64>,
    pub synth: SyntheticConfig,
    pub split: SplitSettings,
}

/// Small ViT on the six HLS bands at 64 px with a linear head.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig::new(64, 4, 4, 8, &PRITHVI_BANDS, (64, 64)),
        peft: PeftConfig::None,
        policy: FreezePolicy::FullFineTune,
        decoder: DecoderConfig::new(DecoderKind::Linear, 2),
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            run: RunConfig::new(tiny_model(), 1e-3, 0),
            search: LrSearchConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            synth: SyntheticConfig::default(),
            split: SplitSettings::default(),
        }
    }
}

const SECTIONS: [&str; 9] = ["data", "model", "peft", "decoder", "train", "search", "replicate", "synth", "split"];

fn invalid(e: impl Display) -> ConfigError {
    ConfigError::Invalid(e.to_string())
}

impl FromStr for ExperimentConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut doc = parse_ini(text)?;
        for (name, (line, _)) in &doc.sections {
            if !SECTIONS.contains(&name.as_str()) {
                return Err(ConfigError::UnknownSection { line: *line, name: name.clone() });
            }
        }
        let mut cfg = ExperimentConfig::default();

        let mut r = Reader::new(&mut doc, "data");
        if let Some(p) = r.optional_path("manifest") {
            cfg.manifest = p;
        }
        r.finish()?;

        let mut r = Reader::new(&mut doc, "model");
        let bb = &mut cfg.run.model.backbone;
        if let Some(e) = r.raw("preset") {
            *bb = match e.value.as_str() {
                "tiny" => tiny_model().backbone,
                "vit-b16" => BackboneConfig::vit_b16(),
                "vit-l16" => BackboneConfig::vit_l16(),
                "vit-b8" => BackboneConfig::vit_b8(),
                other => return Err(ConfigError::Value { line: e.line, key: "preset".into(), msg: format!("unknown preset '{other}'") }),
            };
        }
        r.set("embed_dim", &mut bb.embed_dim)?;
        let depth_given = r.entries.contains_key("depth");
        r.set("depth", &mut bb.depth)?;
        if depth_given {
            bb.tap_layers = default_taps(bb.depth);
        }
        r.set("heads", &mut bb.heads)?;
        r.set("patch_size", &mut bb.patch_size)?;
        r.set("mlp_ratio", &mut bb.mlp_ratio)?;
        if let Some(v) = r.list("bands")? {
            bb.band_ids = v;
        }
        if let Some(v) = r.extent("image_size")? {
            bb.image_size = v;
        }
        if let Some(v) = r.list("taps")? {
            bb.tap_layers = v;
        }
        r.set("metadata", &mut bb.metadata_enabled)?;
        r.finish()?;

        let mut r = Reader::new(&mut doc, "peft");
        if let Some(p) = r.parse::<FreezePolicy>("policy")? {
            cfg.run.model.policy = p;
            cfg.run.model.peft = PeftConfig::for_policy(p);
        }
        if let Some(e) = r.raw("method") {
            cfg.run.model.peft = match e.value.as_str() {
                "none" => PeftConfig::None,
                "lora" => PeftConfig::Lora(LoraConfig::default()),
                "vpt" => PeftConfig::Vpt(VptConfig::default()),
                "vit-adapter" => PeftConfig::VitAdapter(VitAdapterConfig::default()),
                other => return Err(ConfigError::Value { line: e.line, key: "method".into(), msg: format!("unknown method '{other}'") }),
            };
        }
        match &mut cfg.run.model.peft {
            PeftConfig::None => {}
            PeftConfig::Lora(c) => {
                r.set("rank", &mut c.rank)?;
                r.set("scaling", &mut c.scaling)?;
                if let Some(t) = r.list::<LoraTarget>("targets")? {
                    c.targets = t;
                }
            }
            PeftConfig::Vpt(c) => {
                r.set("prompts_per_layer", &mut c.prompts_per_layer)?;
            }
            PeftConfig::VitAdapter(c) => {
                if let Some(w) = r.list("widths")? {
                    c.widths = w;
                }
                if let Some(l) = r.list("injection_layers")? {
                    c.injection_layers = (!l.is_empty()).then_some(l);
                }
                r.set("ffn_ratio", &mut c.ffn_ratio)?;
            }
        }
        r.finish()?;

        let mut r = Reader::new(&mut doc, "decoder");
        let d = &mut cfg.run.model.decoder;
        if let Some(k) = r.parse::<DecoderKind>("kind")? {
            d.kind = k;
        }
        r.set("num_classes", &mut d.num_classes)?;
        r.set("fcn_width", &mut d.fcn_width)?;
        r.set("upernet_width", &mut d.upernet_width)?;
        if let Some(v) = r.list("unet_widths")? {
            d.unet_widths = v;
        }
        if let Some(v) = r.list("ppm_scales")? {
            d.ppm_scales = v;
        }
        r.finish()?;

        let mut r = Reader::new(&mut doc, "train");
        let run = &mut cfg.run;
        r.set("lr", &mut run.lr)?;
        r.set("batch_size", &mut run.batch_size)?;
        r.set("max_epochs", &mut run.max_epochs)?;
        r.set("early_stop_patience", &mut run.early_stop_patience)?;
        r.set("plateau_patience", &mut run.plateau.patience)?;
        r.set("plateau_factor", &mut run.plateau.factor)?;
        r.set("beta1", &mut run.optimizer.beta1)?;
        r.set("beta2", &mut run.optimizer.beta2)?;
        r.set("eps", &mut run.optimizer.eps)?;
        r.set("weight_decay", &mut run.optimizer.weight_decay)?;
        r.set("seed", &mut run.seed)?;
        if let Some(b) = r.list::<String>("input_bands")? {
            run.input_bands = (!b.is_empty()).then_some(b);
        }
        if let Some(p) = r.optional_path("init_checkpoint") {
            run.init_checkpoint = p;
        }
        r.finish()?;

        let mut r = Reader::new(&mut doc, "search");
        r.set("trials", &mut cfg.search.trials)?;
        r.set("low", &mut cfg.search.low)?;
        r.set("high", &mut cfg.search.high)?;
        r.set("epochs", &mut cfg.search.epochs)?;
        r.finish()?;

        let mut r = Reader::new(&mut doc, "replicate");
        if let Some(s) = r.list("seeds")? {
            cfg.seeds = s;
        }
        r.finish()?;

        let mut r = Reader::new(&mut doc, "synth");
        let s = &mut cfg.synth;
        if let Some(v) = r.list("regions")? {
            s.regions = v;
        }
        r.set("ghos_region", &mut s.ghos_region)?;
        r.set("samples_per_region", &mut s.samples_per_region)?;
        if let Some(v) = r.list("bands")? {
            s.bands = v;
        }
        if let Some(v) = r.extent("extent")? {
            s.extent = v;
        }
        r.set("num_classes", &mut s.num_classes)?;
        r.set("noise", &mut s.noise)?;
        r.set("region_shift", &mut s.region_shift)?;
        r.set("ghos_offset", &mut s.ghos_offset)?;
        r.set("drift", &mut s.drift)?;
        if let Some(v) = r.pair("transect_cuts")? {
            s.transect_cuts = v;
        }
        r.set("blobs_per_class", &mut s.blobs_per_class)?;
        r.set("seed", &mut s.seed)?;
        r.finish()?;

        let mut r = Reader::new(&mut doc, "split");
        let sp = &mut cfg.split;
        r.set("mode", &mut sp.mode)?;
        r.set("buffer_km", &mut sp.buffer_km)?;
        r.set("train_ratio", &mut sp.ratios.train)?;
        r.set("val_ratio", &mut sp.ratios.val)?;
        r.set("test_ratio", &mut sp.ratios.test)?;
        r.set("quota_train", &mut sp.quotas.train)?;
        r.set("quota_val", &mut sp.quotas.val)?;
        r.set("quota_test", &mut sp.quotas.test)?;
        r.set("quota_ghos", &mut sp.quotas.ghos)?;
        if let Some(v) = r.list("excluded_regions")? {
            sp.excluded_regions = v;
        }
        r.set("seed", &mut sp.seed)?;
        r.finish()?;

        cfg.validate()?;
        Ok(cfg)
    }
}

fn join<T: Display>(v: &[T]) -> String {
    if v.is_empty() {
        return "none".into();
    }
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.run.model;
        m.backbone.validate().map_err(invalid)?;
        m.decoder.validate(m.backbone.patch_size).map_err(invalid)?;
        if m.policy.required_group().is_some() && PeftConfig::for_policy(m.policy) != PeftConfig::None {
            let matches = matches!(
                (&m.peft, m.policy),
                (PeftConfig::Lora(_), FreezePolicy::Lora) | (PeftConfig::Vpt(_), FreezePolicy::Vpt) | (PeftConfig::VitAdapter(_), FreezePolicy::VitAdapter)
            );
            if !matches {
                return Err(invalid(format!("policy '{}' needs its own attachment method", m.policy)));
            }
        }
        self.run.validate().map_err(invalid)?;
        self.synth.validate().map_err(invalid)?;
        let s = &self.search;
        if s.trials == 0 || s.epochs == 0 || !(s.low > 0.0 && s.low <= s.high) {
            return Err(invalid("search needs trials, epochs and 0 < low <= high"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("replicate needs at least one seed"));
        }
        Ok(())
    }

    /// Every setting written out explicitly; parsing it back gives `self`.
    pub fn to_ini(&self) -> String {
        let mut o = String::new();
        let m = &self.run.model;
        let b = &m.backbone;
        let _ = writeln!(o, "[data]\nmanifest = {}\n", self.manifest.as_ref().map_or("none".into(), |p| p.display().to_string()));
        let _ = writeln!(
            o,
            "[model]\nembed_dim = {}\ndepth = {}\nheads = {}\npatch_size = {}\nmlp_ratio = {}\nbands = {}\nimage_size = {}x{}\ntaps = {}\nmetadata = {}\n",
            b.embed_dim,
            b.depth,
            b.heads,
            b.patch_size,
            b.mlp_ratio,
            join(&b.band_ids),
            b.image_size.0,
            b.image_size.1,
            join(&b.tap_layers),
            b.metadata_enabled
        );
        let _ = writeln!(o, "[peft]\npolicy = {}", m.policy);
        match &m.peft {
            PeftConfig::None => {
                let _ = writeln!(o, "method = none");
            }
            PeftConfig::Lora(c) => {
                let _ = writeln!(o, "method = lora\nrank = {}\nscaling = {}\ntargets = {}", c.rank, c.scaling, join(&c.targets));
            }
            PeftConfig::Vpt(c) => {
                let _ = writeln!(o, "method = vpt\nprompts_per_layer = {}", c.prompts_per_layer);
            }
            PeftConfig::VitAdapter(c) => {
                let layers = c.injection_layers.as_deref().map_or("none".into(), join);
                let _ = writeln!(o, "method = vit-adapter\nwidths = {}\ninjection_layers = {layers}\nffn_ratio = {}", join(&c.widths), c.ffn_ratio);
            }
        }
        let d = &m.decoder;
        let _ = writeln!(
            o,
            "\n[decoder]\nkind = {}\nnum_classes = {}\nfcn_width = {}\nupernet_width = {}\nunet_widths = {}\nppm_scales = {}\n",
            d.kind,
            d.num_classes,
            d.fcn_width,
            d.upernet_width,
            join(&d.unet_widths),
            join(&d.ppm_scales)
        );
        let r = &self.run;
        let _ = writeln!(
            o,
            "[train]\nlr = {}\nbatch_size = {}\nmax_epochs = {}\nearly_stop_patience = {}\nplateau_patience = {}\nplateau_factor = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\nweight_decay = {}\nseed = {}\ninput_bands = {}\ninit_checkpoint = {}\n",
            r.lr,
            r.batch_size,
            r.max_epochs,
            r.early_stop_patience,
            r.plateau.patience,
            r.plateau.factor,
            r.optimizer.beta1,
            r.optimizer.beta2,
            r.optimizer.eps,
            r.optimizer.weight_decay,
            r.seed,
            r.input_bands.as_deref().map_or("none".into(), join),
            r.init_checkpoint.as_ref().map_or("none".into(), |p| p.display().to_string())
        );
        let s = &self.search;
        let _ = writeln!(o, "[search]\ntrials = {}\nlow = {}\nhigh = {}\nepochs = {}\n", s.trials, s.low, s.high, s.epochs);
        let _ = writeln!(o, "[replicate]\nseeds = {}\n", join(&self.seeds));
        let y = &self.synth;
        let _ = writeln!(
            o,
            "[synth]\nregions = {}\nghos_region = {}\nsamples_per_region = {}\nbands = {}\nextent = {}x{}\nnum_classes = {}\nnoise = {}\nregion_shift = {}\nghos_offset = {}\ndrift = {}\ntransect_cuts = {}, {}\nblobs_per_class = {}\nseed = {}\n",
            join(&y.regions),
            y.ghos_region,
            y.samples_per_region,
            join(&y.bands),
            y.extent.0,
            y.extent.1,
            y.num_classes,
            y.noise,
            y.region_shift,
            y.ghos_offset,
            y.drift,
            y.transect_cuts.0,
            y.transect_cuts.1,
            y.blobs_per_class,
            y.seed
        );
        let p = &self.split;
        let _ = write!(
            o,
            "[split]\nmode = {}\nbuffer_km = {}\ntrain_ratio = {}\nval_ratio = {}\ntest_ratio = {}\nquota_train = {}\nquota_val = {}\nquota_test = {}\nquota_ghos = {}\nexcluded_regions = {}\nseed = {}\n",
            p.mode,
            p.buffer_km,
            p.ratios.train,
            p.ratios.val,
            p.ratios.test,
            p.quotas.train,
            p.quotas.val,
            p.quotas.test,
            p.quotas.ghos,
            join(&p.excluded_regions),
            p.seed
        );
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        let back: ExperimentConfig = c.to_ini().parse().unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_and_round_trip() {
        let text = "# demo\n[model]\npreset = vit-b16\n[peft]\npolicy = lora\nrank = 8\ntargets = q, v\n[decoder]\nkind = upernet\nnum_classes = 5\n[train]\nlr = 0.0005 # inline\ninput_bands = B02, B03\n";
        let c: ExperimentConfig = text.parse().unwrap();
        assert_eq!(c.run.model.backbone.embed_dim, 768);
        assert_eq!(c.run.model.peft, PeftConfig::Lora(LoraConfig { rank: 8, targets: vec![LoraTarget::Query, LoraTarget::Value], scaling: 1.0 }));
        assert_eq!(c.run.lr, 5e-4);
        assert_eq!(c.run.input_bands.as_deref().unwrap().len(), 2);
        let back: ExperimentConfig = c.to_ini().parse().unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_carry_line_numbers() {
        let e = "[train]\nlr = 0.1\n\nlearning_rate = 3\n".parse::<ExperimentConfig>().unwrap_err();
        assert_eq!(e, ConfigError::UnknownKey { line: 4, section: "train".into(), key: "learning_rate".into() });
        let e = "[nope]\n".parse::<ExperimentConfig>().unwrap_err();
        assert!(matches!(e, ConfigError::UnknownSection { line: 1, .. }));
        // a key that belongs to another method is unknown here
        let e = "[peft]\npolicy = vpt\nrank = 4\n".parse::<ExperimentConfig>().unwrap_err();
        assert!(matches!(e, ConfigError::UnknownKey { line: 3, .. }));
    }

    #[test]
    fn syntax_errors() {
        for (text, line) in [("lr = 1\n", 1), ("[train\n", 1), ("[train]\nlr\n", 2), ("[train]\nlr = 1\nlr = 2\n", 3)] {
            match parse_ini(text).unwrap_err() {
                ConfigError::Syntax { line: l, .. } => assert_eq!(l, line, "{text:?}"),
                e => panic!("{e:?}"),
            }
        }
        let e = "[train]\nlr = fast\n".parse::<ExperimentConfig>().unwrap_err();
        assert!(matches!(e, ConfigError::Value { line: 2, .. }));
    }

    #[test]
    fn policy_and_method_must_agree() {
        assert!("[peft]\npolicy = lora\nmethod = vpt\n".parse::<ExperimentConfig>().is_err());
        assert!("[peft]\npolicy = linear-probe\n".parse::<ExperimentConfig>().is_ok());
    }
}
