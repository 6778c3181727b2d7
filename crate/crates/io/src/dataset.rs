//! Case manifests (`volume_path<TAB>mask_path<TAB>split`, paths relative to
//! the manifest) and synthetic cohort generation.

use std::path::{Path, PathBuf};

use comma_core::phantom::{assign_splits, case_seed, generate_phantom, PhantomSpec, Split};
use comma_core::train::Case;

use crate::error::{create_dir, read, write, IoError, Result};
use crate::vvol;

pub const MANIFEST_FILE: &str = "manifest.tsv";
const HEADER: &str = "volume_path\tmask_path\tsplit";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub volume: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

impl Entry {
    /// File stem of the volume.
    pub fn name(&self) -> String {
        self.volume.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<Entry>,
}

impl Manifest {
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || (i == 0 && line == HEADER) {
                continue;
            }
            let parse = |msg: String| IoError::Parse { line: i + 1, msg };
            let cols: Vec<&str> = line.split('\t').collect();
            let [v, m, s] = cols[..] else {
                return Err(parse(format!("expected 3 tab-separated columns, found {}", cols.len())));
            };
            let split = s.trim().parse::<Split>().map_err(|e| parse(e.to_string()))?;
            entries.push(Entry { volume: v.into(), mask: m.into(), split });
        }
        let m = Self { root: root.into(), entries };
        m.check_disjoint()?;
        Ok(m)
    }

    /// Reads `dir/manifest.tsv`, or the file itself if `path` is one.
    pub fn read(path: &Path) -> Result<Self> {
        let (file, root) = if path.is_dir() {
            (path.join(MANIFEST_FILE), path.to_path_buf())
        } else {
            (path.to_path_buf(), path.parent().map_or_else(PathBuf::new, Path::to_path_buf))
        };
        let text = String::from_utf8_lossy(&read(&file)?).into_owned();
        Self::parse(&text, root).map_err(|e| e.in_file(&file))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{HEADER}\n");
        for e in &self.entries {
            out += &format!("{}\t{}\t{}\n", e.volume.display(), e.mask.display(), e.split.as_str());
        }
        out
    }

    pub fn write(&self) -> Result<()> {
        write(&self.root.join(MANIFEST_FILE), self.to_tsv().as_bytes())
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::HashMap::new();
        for e in &self.entries {
            for p in [&e.volume, &e.mask] {
                if let Some(prev) = seen.insert(p.clone(), e.split) {
                    if prev != e.split {
                        return Err(IoError::Usage(format!("{} appears in both {} and {}", p.display(), prev.as_str(), e.split.as_str())));
                    }
                    return Err(IoError::Usage(format!("{} listed twice", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    /// Loads every case of `split` with its name.
    pub fn load(&self, split: Split) -> Result<Vec<(String, Case)>> {
        self.split(split)
            .map(|e| {
                let image = vvol::read_volume(&self.path(&e.volume))?;
                let mask = vvol::read_mask(&self.path(&e.mask))?;
                let case = Case { image, mask };
                case.mask.check_same_extents(&comma_core::volume::BinaryMask3D::zeros(case.image.extents()))?;
                Ok((e.name(), case))
            })
            .collect()
    }
}

/// Writes `n` phantoms drawn from `template` into `out` together with their
/// manifest. Case `i` uses `case_seed(seed, i)`.
pub fn make_dataset(out: &Path, n: usize, template: &PhantomSpec, seed: u64, ratios: [f64; 3], workers: usize) -> Result<Manifest> {
    template.validate()?;
    let splits = assign_splits(n, ratios)?;
    create_dir(out)?;
    let workers = workers.clamp(1, n.max(1));
    let entries: Vec<Entry> = (0..n)
        .map(|i| Entry {
            volume: format!("case_{i:03}.vvol").into(),
            mask: format!("case_{i:03}_mask.vvol").into(),
            split: splits[i],
        })
        .collect();
    std::thread::scope(|s| -> Result<()> {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let entries = &entries;
                s.spawn(move || -> Result<()> {
                    for i in (w..n).step_by(workers) {
                        let spec = PhantomSpec { seed: case_seed(seed, i), ..template.clone() };
                        let (image, mask) = generate_phantom(&spec)?;
                        vvol::write_volume(&out.join(&entries[i].volume), &image)?;
                        vvol::write_mask(&out.join(&entries[i].mask), &mask)?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().try_for_each(|h| h.join().expect("generator thread panicked"))
    })?;
    let m = Manifest { root: out.to_path_buf(), entries };
    m.write()?;
    Ok(m)
}
