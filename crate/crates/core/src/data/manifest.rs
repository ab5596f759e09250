//! Line-oriented dataset manifest:
//! `split<TAB>image_path<TAB>mask_path<TAB>seed<TAB>index`, preceded by
//! `#` header lines carrying the format version and generator settings.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{generate_sample, pgm, SynthSpec};
use crate::par::{self, Execution};
use crate::pipeline::TrainSample;
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Manifest(format!("unknown split {s:?}"))),
        }
    }
}

/// Split for `index` out of `count`: the first 80% train, next 10% val.
pub fn split_of(index: usize, count: usize) -> Split {
    let n_train = count * 8 / 10;
    let n_val = count / 10;
    if index < n_train {
        Split::Train
    } else if index < n_train + n_val {
        Split::Val
    } else {
        Split::Test
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub split: Split,
    /// Relative to the manifest's directory.
    pub image: PathBuf,
    pub mask: PathBuf,
    pub seed: u64,
    pub index: usize,
}

impl ManifestEntry {
    pub fn id(&self) -> String {
        format!("{:05}", self.index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    /// Generator settings, when the dataset is synthetic.
    pub synth: Option<SynthSpec>,
    pub entries: Vec<ManifestEntry>,
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("# mednca-manifest version={}\n", self.version);
        if let Some(sp) = &self.synth {
            let _ = writeln!(
                s,
                "# synth seed={} count={} height={} width={} radius_min={} radius_max={} deform={} noise={} distractors={}",
                sp.seed,
                sp.count,
                sp.height,
                sp.width,
                sp.organ_radius_range.0,
                sp.organ_radius_range.1,
                sp.deform_amplitude,
                sp.noise_sigma,
                sp.n_distractors
            );
        }
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", e.split, e.image.display(), e.mask.display(), e.seed, e.index);
        }
        s
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let bad = |line: usize, m: String| Error::Manifest(format!("line {}: {m}", line + 1));
        let mut version = None;
        let mut synth = None;
        let mut entries = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# mednca-manifest ") {
                let v = rest
                    .strip_prefix("version=")
                    .and_then(|v| v.trim().parse::<u32>().ok())
                    .ok_or_else(|| bad(ln, "malformed version line".into()))?;
                if v != MANIFEST_VERSION {
                    return Err(bad(ln, format!("unsupported manifest version {v}")));
                }
                version = Some(v);
            } else if let Some(rest) = line.strip_prefix("# synth ") {
                synth = Some(parse_synth(rest).map_err(|m| bad(ln, m))?);
            } else if line.starts_with('#') {
                continue;
            } else {
                let cols: Vec<&str> = line.split('\t').collect();
                let [split, image, mask, seed, index] = cols[..] else {
                    return Err(bad(ln, format!("expected 5 tab-separated fields, got {}", cols.len())));
                };
                entries.push(ManifestEntry {
                    split: split.parse().map_err(|e: Error| bad(ln, e.to_string()))?,
                    image: PathBuf::from(image),
                    mask: PathBuf::from(mask),
                    seed: seed.parse().map_err(|_| bad(ln, format!("bad seed {seed:?}")))?,
                    index: index.parse().map_err(|_| bad(ln, format!("bad index {index:?}")))?,
                });
            }
        }
        let version = version.ok_or_else(|| Error::Manifest("missing version header".into()))?;
        let m = Self { version, synth, entries, root: root.to_path_buf() };
        m.check_disjoint()?;
        Ok(m)
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.image) || !seen.insert(&e.mask) {
                return Err(Error::Manifest(format!("sample {} is listed more than once", e.image.display())));
            }
        }
        Ok(())
    }

    /// Parse `path` and check that every listed file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let m = Self::parse(&text, &root)?;
        for e in &m.entries {
            for p in [&e.image, &e.mask] {
                let full = m.root.join(p);
                if !full.is_file() {
                    return Err(Error::Manifest(format!("missing file {}", full.display())));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn read_entry(&self, e: &ManifestEntry) -> Result<TrainSample<f32>> {
        let image = pgm::read_image(&self.root.join(&e.image))?;
        let mask = pgm::read_mask(&self.root.join(&e.mask))?;
        if image.shape() != mask.shape() {
            return Err(Error::Manifest(format!("image and mask sizes differ for {}", e.image.display())));
        }
        Ok(TrainSample { image, mask })
    }

    /// `(id, sample)` pairs of one split, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<(String, TrainSample<f32>)>> {
        self.split(split).map(|e| Ok((e.id(), self.read_entry(e)?))).collect()
    }

    /// Regenerate every entry from its seed and index and compare the
    /// encoded bytes with the files on disk. Returns the mismatching ids.
    pub fn verify_regeneration(&self) -> Result<Vec<String>> {
        let base =
            self.synth.clone().ok_or_else(|| Error::Manifest("manifest carries no generator settings".into()))?;
        let mut mismatched = Vec::new();
        for e in &self.entries {
            let spec = SynthSpec { seed: e.seed, ..base.clone() };
            let s = generate_sample(&spec, e.index);
            let img = pgm::image_to_pgm(&s.image)?.encode();
            let msk = pgm::mask_to_pgm(&s.mask)?.encode();
            let read = |p: &Path| {
                let full = self.root.join(p);
                fs::read(&full).map_err(|err| Error::io(full, err))
            };
            if read(&e.image)? != img || read(&e.mask)? != msk {
                mismatched.push(e.id());
            }
        }
        Ok(mismatched)
    }
}

fn parse_synth(rest: &str) -> std::result::Result<SynthSpec, String> {
    let mut spec = SynthSpec::default();
    for kv in rest.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("bad synth field {kv:?}"))?;
        let bad = || format!("bad value for {k}: {v:?}");
        match k {
            "seed" => spec.seed = v.parse().map_err(|_| bad())?,
            "count" => spec.count = v.parse().map_err(|_| bad())?,
            "height" => spec.height = v.parse().map_err(|_| bad())?,
            "width" => spec.width = v.parse().map_err(|_| bad())?,
            "radius_min" => spec.organ_radius_range.0 = v.parse().map_err(|_| bad())?,
            "radius_max" => spec.organ_radius_range.1 = v.parse().map_err(|_| bad())?,
            "deform" => spec.deform_amplitude = v.parse().map_err(|_| bad())?,
            "noise" => spec.noise_sigma = v.parse().map_err(|_| bad())?,
            "distractors" => spec.n_distractors = v.parse().map_err(|_| bad())?,
            _ => return Err(format!("unknown synth field {k:?}")),
        }
    }
    Ok(spec)
}

/// Write `spec.count` image/mask pairs plus `manifest.tsv` into `out_dir`.
pub fn generate_dataset(spec: &SynthSpec, out_dir: &Path, exec: Execution) -> Result<DatasetManifest> {
    spec.validate()?;
    for sub in ["images", "masks"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir, e))?;
    }
    let written = par::map_indexed(exec, spec.count, |index| -> Result<ManifestEntry> {
        let s = generate_sample(spec, index);
        let entry = ManifestEntry {
            split: split_of(index, spec.count),
            image: PathBuf::from(format!("images/{index:05}.pgm")),
            mask: PathBuf::from(format!("masks/{index:05}.pgm")),
            seed: spec.seed,
            index,
        };
        pgm::write_image(&out_dir.join(&entry.image), &s.image)?;
        pgm::write_mask(&out_dir.join(&entry.mask), &s.mask)?;
        Ok(entry)
    });
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        synth: Some(spec.clone()),
        entries: written.into_iter().collect::<Result<_>>()?,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
