//! Descriptor and manifest storage.
//!
//! Descriptor files are a fixed 18-byte header followed by a dense row-major
//! payload of little-endian `f32` values:
//!
//! | offset | size | field                 |
//! |--------|------|-----------------------|
//! | 0      | 4    | magic `VPRD`          |
//! | 4      | 2    | version (`u16`, = 1)  |
//! | 6      | 8    | row count (`u64`)     |
//! | 14     | 4    | dimension (`u32`)     |
//! | 18     | ...  | `count * dim` values  |
//!
//! Manifests are UTF-8 text. The first line is `name,descriptor_file`, every
//! following line is `image_key,row_index` with row indices running `0..count`
//! in order.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{io_err, Result, VprError};

pub const MAGIC: [u8; 4] = *b"VPRD";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 18;

/// Identifies one image as `Place####_Cond##_G##`.
///
/// Ordering is by place, then condition, then group index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImageKey {
    pub place_id: u32,
    pub condition_id: u32,
    pub group_index: u32,
}

impl ImageKey {
    pub fn new(place_id: u32, condition_id: u32, group_index: u32) -> Self {
        Self {
            place_id,
            condition_id,
            group_index,
        }
    }
}

impl fmt::Display for ImageKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Place{:04}_Cond{:02}_G{:02}",
            self.place_id, self.condition_id, self.group_index
        )
    }
}

fn parse_field(s: &str, prefix: &str, min_digits: usize) -> Option<u32> {
    let digits = s.strip_prefix(prefix)?;
    if digits.len() < min_digits || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

impl FromStr for ImageKey {
    type Err = VprError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || VprError::MalformedKey(s.to_string());
        let mut parts = s.split('_');
        let (Some(p), Some(c), Some(g), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        Ok(Self {
            place_id: parse_field(p, "Place", 4).ok_or_else(bad)?,
            condition_id: parse_field(c, "Cond", 2).ok_or_else(bad)?,
            group_index: parse_field(g, "G", 2).ok_or_else(bad)?,
        })
    }
}

/// One image descriptor: a non-empty vector of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    values: Vec<f32>,
}

impl Descriptor {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(VprError::ZeroDim);
        }
        if let Some(col) = values.iter().position(|v| !v.is_finite()) {
            return Err(VprError::NonFinite { row: 0, col });
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

impl TryFrom<Vec<f32>> for Descriptor {
    type Error = VprError;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Self::new(values)
    }
}

fn uniform_dim(descriptors: &[Descriptor]) -> Result<usize> {
    let first = descriptors.first().ok_or(VprError::EmptyDescriptors)?;
    let dim = first.dim();
    for d in descriptors {
        if d.dim() != dim {
            return Err(VprError::DimMismatch {
                expected: dim,
                actual: d.dim(),
            });
        }
    }
    Ok(dim)
}

/// Serializes descriptors into the on-disk byte layout.
pub fn encode_descriptors(descriptors: &[Descriptor]) -> Result<Vec<u8>> {
    let dim = uniform_dim(descriptors)?;
    let dim32 = u32::try_from(dim).map_err(|_| {
        VprError::InvalidArgument(format!("dimension {dim} does not fit in u32"))
    })?;
    let mut out = Vec::with_capacity(HEADER_LEN + descriptors.len() * dim * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(descriptors.len() as u64).to_le_bytes());
    out.extend_from_slice(&dim32.to_le_bytes());
    for d in descriptors {
        for v in &d.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses the on-disk byte layout.
pub fn decode_descriptors(bytes: &[u8]) -> Result<Vec<Descriptor>> {
    if bytes.len() < HEADER_LEN {
        return Err(VprError::Truncated {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(VprError::BadMagic { found: magic });
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(VprError::UnsupportedVersion(version));
    }
    let count = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
    let dim = u32::from_le_bytes(bytes[14..18].try_into().unwrap());

    let expected = count
        .checked_mul(dim as u64)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN as u64));
    if expected != Some(bytes.len() as u64) {
        return Err(VprError::Truncated {
            expected: expected.unwrap_or(u64::MAX),
            actual: bytes.len() as u64,
        });
    }
    if count == 0 {
        return Err(VprError::EmptyDescriptors);
    }
    if dim == 0 {
        return Err(VprError::ZeroDim);
    }

    let dim = dim as usize;
    bytes[HEADER_LEN..]
        .chunks_exact(dim * 4)
        .enumerate()
        .map(|(row, chunk)| {
            let values: Vec<f32> = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if let Some(col) = values.iter().position(|v| !v.is_finite()) {
                return Err(VprError::NonFinite { row, col });
            }
            Ok(Descriptor { values })
        })
        .collect()
}

pub fn write_descriptor_file(descriptors: &[Descriptor], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_descriptors(descriptors)?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_descriptor_file(path: impl AsRef<Path>) -> Result<Vec<Descriptor>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_descriptors(&bytes)
}

/// Places, their images, and the descriptor row backing each image.
///
/// Entry `k` is backed by descriptor row `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    name: String,
    descriptor_file: PathBuf,
    entries: Vec<ImageKey>,
    places: BTreeMap<u32, Vec<usize>>,
    lookup: HashMap<ImageKey, usize>,
}

impl DatasetManifest {
    /// Validates and indexes an ordered list of image keys.
    pub fn new(
        name: impl Into<String>,
        descriptor_file: impl Into<PathBuf>,
        entries: Vec<ImageKey>,
    ) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(entries.len());
        let mut places: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (idx, key) in entries.iter().enumerate() {
            if lookup.insert(*key, idx).is_some() {
                return Err(VprError::DuplicateKey(key.to_string()));
            }
            places.entry(key.place_id).or_default().push(idx);
        }
        if let Some((&place_id, images)) = places.iter().find(|(_, v)| v.len() < 2) {
            return Err(VprError::PlaceTooSmall {
                place_id,
                count: images.len(),
            });
        }
        Ok(Self {
            name: name.into(),
            descriptor_file: descriptor_file.into(),
            entries,
            places,
            lookup,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn descriptor_file(&self) -> &Path {
        &self.descriptor_file
    }

    pub fn entries(&self) -> &[ImageKey] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn place_count(&self) -> usize {
        self.places.len()
    }

    /// Places in ascending id order, each with its entry indices in manifest order.
    pub fn places(&self) -> impl Iterator<Item = (u32, &[usize])> + '_ {
        self.places.iter().map(|(id, v)| (*id, v.as_slice()))
    }

    pub fn place_images(&self, place_id: u32) -> Option<&[usize]> {
        self.places.get(&place_id).map(Vec::as_slice)
    }

    /// Entry (and descriptor row) index of `key`.
    pub fn index_of(&self, key: &ImageKey) -> Option<usize> {
        self.lookup.get(key).copied()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{},{}\n", self.name, self.descriptor_file.display());
        for (row, key) in self.entries.iter().enumerate() {
            out.push_str(&format!("{key},{row}\n"));
        }
        out
    }
}

impl FromStr for DatasetManifest {
    type Err = VprError;

    fn from_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or(VprError::Manifest {
            line: 1,
            message: "missing header".into(),
        })?;
        let (name, descriptor_file) = header.split_once(',').ok_or(VprError::Manifest {
            line: 1,
            message: "header must be `name,descriptor_file`".into(),
        })?;

        let mut entries = Vec::new();
        for (line, raw) in lines {
            if raw.trim().is_empty() {
                continue;
            }
            let (key, row) = raw.split_once(',').ok_or_else(|| VprError::Manifest {
                line,
                message: format!("expected `image_key,row_index`, got {raw:?}"),
            })?;
            let key: ImageKey = key.trim().parse()?;
            let row: usize = row.trim().parse().map_err(|_| VprError::Manifest {
                line,
                message: format!("bad row index {row:?}"),
            })?;
            if row != entries.len() {
                return Err(VprError::RowGap {
                    line,
                    expected: entries.len(),
                    found: row,
                });
            }
            entries.push(key);
        }
        DatasetManifest::new(name.trim(), descriptor_file.trim(), entries)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.parse()
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, manifest.to_text()).map_err(io_err(path))
}

/// A manifest together with its descriptors, checked for agreement.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub descriptors: Vec<Descriptor>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, descriptors: Vec<Descriptor>) -> Result<Self> {
        if manifest.len() != descriptors.len() {
            return Err(VprError::RowCountMismatch {
                entries: manifest.len(),
                rows: descriptors.len(),
            });
        }
        uniform_dim(&descriptors)?;
        Ok(Self {
            manifest,
            descriptors,
        })
    }

    /// Loads a manifest and its descriptor file. Without an explicit path the
    /// manifest's `descriptor_file` is resolved relative to the manifest.
    pub fn load(manifest_path: impl AsRef<Path>, descriptor_path: Option<&Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = load_manifest(manifest_path)?;
        let desc_path = match descriptor_path {
            Some(p) => p.to_path_buf(),
            None => manifest_path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(manifest.descriptor_file()),
        };
        let descriptors = read_descriptor_file(&desc_path)?;
        Self::new(manifest, descriptors)
    }

    pub fn dim(&self) -> usize {
        self.descriptors[0].dim()
    }

    pub fn descriptor(&self, entry: usize) -> &Descriptor {
        &self.descriptors[entry]
    }
}
