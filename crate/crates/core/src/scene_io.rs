//! Point-cloud scenes: loading, validation, class remapping and export.
//!
//! Scenes are read from whitespace-separated ASCII. Two layouts are
//! supported:
//!
//! * [`SceneFormat::XyzIrgbLabels`]: `x y z intensity r g b` per line, with an
//!   optional parallel labels file holding one integer per line. Labels follow
//!   the Semantic3D convention where `0` marks an unlabeled point and classes
//!   start at `1`; they are shifted down by one on load so that class ids are
//!   contiguous from zero.
//! * [`SceneFormat::Xyzl`]: `x y z label` per line, labels taken verbatim.
//!
//! Intensity and colour columns are validated and dropped; the pipeline works
//! on geometry only.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Reserved class id for points without a label.
pub const UNLABELED: u32 = u32::MAX;

/// Colour used for [`UNLABELED`] points in exported PLY files.
pub const UNLABELED_COLOR: [u8; 3] = [128, 128, 128];

pub type Point3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneFormat {
    XyzIrgbLabels,
    Xyzl,
}

impl std::str::FromStr for SceneFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xyz_irgb_labels" => Ok(SceneFormat::XyzIrgbLabels),
            "xyzl" => Ok(SceneFormat::Xyzl),
            other => Err(Error::InvalidArgument(format!(
                "unknown scene format `{other}` (expected xyz_irgb_labels or xyzl)"
            ))),
        }
    }
}

/// A scene: point positions with optional per-point class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<Point3>,
    labels: Option<Vec<u32>>,
    n_classes: usize,
    class_names: Vec<String>,
}

impl PointCloud {
    /// Builds a cloud and checks its invariants.
    ///
    /// `class_names` may be empty, in which case `class_<id>` names are
    /// generated.
    pub fn new(
        positions: Vec<Point3>,
        labels: Option<Vec<u32>>,
        n_classes: usize,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Structural("a point cloud needs at least one point".into()));
        }
        if let Some(i) = positions.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(format!("coordinate of point {i}")));
        }
        if let Some(labels) = &labels {
            if labels.len() != positions.len() {
                return Err(Error::Structural(format!(
                    "{} positions but {} labels",
                    positions.len(),
                    labels.len()
                )));
            }
            if let Some(&bad) = labels
                .iter()
                .find(|&&l| l != UNLABELED && l as usize >= n_classes)
            {
                return Err(Error::LabelOutOfDomain {
                    label: bad,
                    domain: n_classes,
                });
            }
        }
        let class_names = if class_names.is_empty() {
            (0..n_classes).map(|c| format!("class_{c}")).collect()
        } else if class_names.len() != n_classes {
            return Err(Error::Structural(format!(
                "{} class names for {} classes",
                class_names.len(),
                n_classes
            )));
        } else {
            class_names
        };
        Ok(Self {
            positions,
            labels,
            n_classes,
            class_names,
        })
    }

    /// Unlabeled cloud with zero classes.
    pub fn from_positions(positions: Vec<Point3>) -> Result<Self> {
        Self::new(positions, None, 0, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point3] {
        &self.positions
    }

    pub fn position(&self, index: usize) -> Point3 {
        self.positions[index]
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Labels, or an error when the cloud carries none.
    pub fn require_labels(&self) -> Result<&[u32]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("the point cloud has no labels".into()))
    }

    /// Ground-truth labels of the given member indices.
    pub fn labels_of(&self, indices: &[usize]) -> Result<Vec<u32>> {
        let labels = self.require_labels()?;
        Ok(indices.iter().map(|&i| labels[i]).collect())
    }
}

/// Many-to-one mapping of class ids onto a smaller, contiguous class set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassRemap {
    mapping: Vec<u32>,
    new_names: Vec<String>,
}

impl ClassRemap {
    pub fn new(mapping: Vec<u32>, new_names: Vec<String>) -> Result<Self> {
        let n_new = mapping.iter().map(|&m| m as usize + 1).max().unwrap_or(0);
        let mut seen = vec![false; n_new];
        for &m in &mapping {
            seen[m as usize] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument(
                "remap image must be contiguous from 0".into(),
            ));
        }
        let new_names = if new_names.is_empty() {
            (0..n_new).map(|c| format!("class_{c}")).collect()
        } else if new_names.len() != n_new {
            return Err(Error::Structural(format!(
                "{} names for {} remapped classes",
                new_names.len(),
                n_new
            )));
        } else {
            new_names
        };
        Ok(Self { mapping, new_names })
    }

    pub fn identity(n_classes: usize) -> Self {
        Self {
            mapping: (0..n_classes as u32).collect(),
            new_names: (0..n_classes).map(|c| format!("class_{c}")).collect(),
        }
    }

    /// Semantic3D's eight classes merged into six: the two terrain classes
    /// become `terrain` and the two vegetation classes become `vegetation`.
    pub fn semantic3d_six_class() -> Self {
        Self {
            mapping: vec![0, 0, 1, 1, 2, 3, 4, 5],
            new_names: [
                "terrain",
                "vegetation",
                "building",
                "hardscape",
                "artefacts",
                "cars",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }

    pub fn domain_size(&self) -> usize {
        self.mapping.len()
    }

    pub fn image_size(&self) -> usize {
        self.new_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.new_names
    }

    pub fn map(&self, label: u32) -> Result<u32> {
        if label == UNLABELED {
            return Ok(UNLABELED);
        }
        self.mapping
            .get(label as usize)
            .copied()
            .ok_or(Error::LabelOutOfDomain {
                label,
                domain: self.mapping.len(),
            })
    }
}

/// Applies `remap` to every label of `cloud`.
pub fn remap_labels(cloud: &PointCloud, remap: &ClassRemap) -> Result<PointCloud> {
    let labels = cloud.require_labels()?;
    let mapped = labels
        .iter()
        .map(|&l| remap.map(l))
        .collect::<Result<Vec<_>>>()?;
    PointCloud::new(
        cloud.positions.clone(),
        Some(mapped),
        remap.image_size(),
        remap.new_names.clone(),
    )
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

fn parse_f64(path: &Path, line: usize, token: &str) -> Result<f64> {
    let v: f64 = token
        .parse()
        .map_err(|_| Error::parse(path, line, format!("`{token}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(path, line, format!("`{token}` is not finite")));
    }
    Ok(v)
}

fn parse_label(path: &Path, line: usize, token: &str) -> Result<i64> {
    token
        .parse()
        .map_err(|_| Error::parse(path, line, format!("`{token}` is not an integer label")))
}

/// Reads a labels file: one integer per line, `-1` meaning unlabeled.
pub fn read_labels(path: &Path) -> Result<Vec<u32>> {
    let mut labels = Vec::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        let token = line.trim();
        if token.is_empty() {
            continue;
        }
        let v = parse_label(path, line_no, token)?;
        labels.push(if v < 0 { UNLABELED } else { v as u32 });
    }
    Ok(labels)
}

/// Writes one class id per line; [`UNLABELED`] is written as `-1`.
pub fn write_labels(path: &Path, labels: &[u32]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for &l in labels {
        if l == UNLABELED {
            writeln!(w, "-1")
        } else {
            writeln!(w, "{l}")
        }
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a scene from disk.
pub fn load_scene(
    points_path: &Path,
    labels_path: Option<&Path>,
    format: SceneFormat,
) -> Result<PointCloud> {
    let columns = match format {
        SceneFormat::XyzIrgbLabels => 7,
        SceneFormat::Xyzl => 4,
    };
    if format == SceneFormat::Xyzl && labels_path.is_some() {
        return Err(Error::InvalidArgument(
            "xyzl scenes carry their labels inline; no labels file expected".into(),
        ));
    }

    let mut positions = Vec::new();
    let mut inline_labels = Vec::new();
    for (line_no, line) in open_lines(points_path)? {
        let line = line.map_err(|e| Error::io(points_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != columns {
            return Err(Error::parse(
                points_path,
                line_no,
                format!("expected {columns} columns, found {}", tokens.len()),
            ));
        }
        let mut p = [0.0; 3];
        for (c, t) in p.iter_mut().zip(&tokens) {
            *c = parse_f64(points_path, line_no, t)?;
        }
        match format {
            SceneFormat::XyzIrgbLabels => {
                for t in &tokens[3..] {
                    parse_f64(points_path, line_no, t)?;
                }
            }
            SceneFormat::Xyzl => {
                let v = parse_label(points_path, line_no, tokens[3])?;
                inline_labels.push(if v < 0 { UNLABELED } else { v as u32 });
            }
        }
        positions.push(p);
    }
    if positions.is_empty() {
        return Err(Error::Structural(format!(
            "{} contains no points",
            points_path.display()
        )));
    }

    let labels = match format {
        SceneFormat::Xyzl => Some(inline_labels),
        SceneFormat::XyzIrgbLabels => match labels_path {
            None => None,
            Some(path) => {
                let raw = read_labels(path)?;
                if raw.len() != positions.len() {
                    return Err(Error::Structural(format!(
                        "{} has {} points but {} has {} labels",
                        points_path.display(),
                        positions.len(),
                        path.display(),
                        raw.len()
                    )));
                }
                Some(
                    raw.into_iter()
                        .map(|l| if l == 0 || l == UNLABELED { UNLABELED } else { l - 1 })
                        .collect(),
                )
            }
        },
    };
    let n_classes = labels
        .as_ref()
        .and_then(|ls| ls.iter().filter(|&&l| l != UNLABELED).max())
        .map_or(0, |&m| m as usize + 1);
    PointCloud::new(positions, labels, n_classes, Vec::new())
}

/// Writes the cloud as `x y z label` lines with six decimal places.
///
/// Unlabeled points (or a cloud without labels) are written with label `-1`.
pub fn save_xyzl(cloud: &PointCloud, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (i, p) in cloud.positions.iter().enumerate() {
        let label = cloud.labels.as_ref().map_or(UNLABELED, |ls| ls[i]);
        let res = if label == UNLABELED {
            writeln!(w, "{:.6} {:.6} {:.6} -1", p[0], p[1], p[2])
        } else {
            writeln!(w, "{:.6} {:.6} {:.6} {}", p[0], p[1], p[2], label)
        };
        res.map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A fixed palette for up to eight classes.
pub fn default_palette() -> Vec<[u8; 3]> {
    vec![
        [0, 0, 255],
        [0, 160, 0],
        [160, 32, 240],
        [255, 105, 180],
        [255, 215, 0],
        [0, 255, 255],
        [255, 0, 0],
        [139, 69, 19],
    ]
}

/// Writes an ASCII PLY with per-vertex position and class colour.
///
/// `labels` is usually a prediction, so it is passed separately from the
/// cloud's own ground truth.
pub fn export_colored_ply(
    cloud: &PointCloud,
    labels: &[u32],
    palette: &[[u8; 3]],
    path: &Path,
) -> Result<()> {
    export_colored_ply_points(cloud.positions(), labels, palette, path)
}

pub(crate) fn export_colored_ply_points(
    positions: &[Point3],
    labels: &[u32],
    palette: &[[u8; 3]],
    path: &Path,
) -> Result<()> {
    if labels.len() != positions.len() {
        return Err(Error::Structural(format!(
            "{} labels for {} points",
            labels.len(),
            positions.len()
        )));
    }
    if let Some(&bad) = labels
        .iter()
        .find(|&&l| l != UNLABELED && l as usize >= palette.len())
    {
        return Err(Error::InvalidArgument(format!(
            "label {bad} has no palette entry ({} colours)",
            palette.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(
        w,
        "ply\nformat ascii 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        positions.len()
    )
    .map_err(io)?;
    for (p, &l) in positions.iter().zip(labels) {
        let c = if l == UNLABELED {
            UNLABELED_COLOR
        } else {
            palette[l as usize]
        };
        writeln!(
            w,
            "{:.6} {:.6} {:.6} {} {} {}",
            p[0], p[1], p[2], c[0], c[1], c[2]
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads back the vertices of an ASCII PLY written by [`export_colored_ply`].
pub fn read_colored_ply(path: &Path) -> Result<(Vec<Point3>, Vec<[u8; 3]>)> {
    let mut lines = open_lines(path)?;
    let mut n_vertices = None;
    let mut header_done = false;
    for (line_no, line) in lines.by_ref() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line_no == 1 && line != "ply" {
            return Err(Error::parse(path, line_no, "missing `ply` magic"));
        }
        if line.starts_with("format") && line != "format ascii 1.0" {
            return Err(Error::parse(path, line_no, "only ASCII PLY is supported"));
        }
        if let Some(rest) = line.strip_prefix("element vertex") {
            n_vertices = Some(
                rest.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::parse(path, line_no, "bad vertex count"))?,
            );
        }
        if line == "end_header" {
            header_done = true;
            break;
        }
    }
    let n = match (header_done, n_vertices) {
        (true, Some(n)) => n,
        _ => return Err(Error::Structural(format!("{}: incomplete PLY header", path.display()))),
    };
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for (line_no, line) in lines.take(n) {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 6 {
            return Err(Error::parse(path, line_no, "expected 6 vertex properties"));
        }
        let mut p = [0.0; 3];
        for (c, tok) in p.iter_mut().zip(&t) {
            *c = parse_f64(path, line_no, tok)?;
        }
        let mut rgb = [0u8; 3];
        for (c, tok) in rgb.iter_mut().zip(&t[3..]) {
            *c = tok
                .parse()
                .map_err(|_| Error::parse(path, line_no, format!("`{tok}` is not a uchar")))?;
        }
        positions.push(p);
        colors.push(rgb);
    }
    if positions.len() != n {
        return Err(Error::Structural(format!(
            "{}: header declares {n} vertices, found {}",
            path.display(),
            positions.len()
        )));
    }
    Ok((positions, colors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_xyzl() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "s.xyzl", "0 0 0 1\n1 0 0 1\n0 1 0 2\n");
        let cloud = load_scene(&p, None, SceneFormat::Xyzl).unwrap();
        assert_eq!(cloud.len(), 3);
        assert_eq!(cloud.labels().unwrap(), &[1, 1, 2]);
        assert_eq!(cloud.n_classes(), 3);
    }

    #[test]
    fn label_count_mismatch_is_structural() {
        let dir = tempfile::tempdir().unwrap();
        let pts = write(&dir, "s.txt", &"0 0 0 10 1 2 3\n".repeat(5));
        let labels = write(&dir, "s.labels", &"1\n".repeat(4));
        let err = load_scene(&pts, Some(&labels), SceneFormat::XyzIrgbLabels).unwrap_err();
        assert!(matches!(err, Error::Structural(_)), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "s.xyzl", "0 0 abc 1\n");
        match load_scene(&p, None, SceneFormat::Xyzl).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn semantic3d_zero_label_is_unlabeled() {
        let dir = tempfile::tempdir().unwrap();
        let pts = write(&dir, "s.txt", "0 0 0 1 2 3 4\n1 1 1 1 2 3 4\n2 2 2 1 2 3 4\n");
        let labels = write(&dir, "s.labels", "0\n1\n8\n");
        let cloud = load_scene(&pts, Some(&labels), SceneFormat::XyzIrgbLabels).unwrap();
        assert_eq!(cloud.labels().unwrap(), &[UNLABELED, 0, 7]);
        assert_eq!(cloud.n_classes(), 8);
    }

    #[test]
    fn semantic3d_merge() {
        let cloud = PointCloud::new(vec![[0.0; 3]; 3], Some(vec![0, 1, 4]), 8, Vec::new()).unwrap();
        let merged = remap_labels(&cloud, &ClassRemap::semantic3d_six_class()).unwrap();
        assert_eq!(merged.labels().unwrap(), &[0, 0, 2]);
        assert_eq!(merged.n_classes(), 6);
        assert_eq!(merged.class_names()[0], "terrain");
    }

    #[test]
    fn identity_remap_is_noop() {
        let cloud = PointCloud::new(vec![[1.0, 2.0, 3.0]; 3], Some(vec![0, 2, 1]), 3, Vec::new()).unwrap();
        let same = remap_labels(&cloud, &ClassRemap::identity(3)).unwrap();
        assert_eq!(same, cloud);
    }

    #[test]
    fn remap_rejects_out_of_domain() {
        let cloud = PointCloud::new(vec![[0.0; 3]], Some(vec![9]), 10, Vec::new()).unwrap();
        let err = remap_labels(&cloud, &ClassRemap::semantic3d_six_class()).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfDomain { label: 9, .. }));
    }

    #[test]
    fn remap_requires_contiguous_image() {
        assert!(ClassRemap::new(vec![0, 2], Vec::new()).is_err());
    }

    #[test]
    fn ply_vertex_lines() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = PointCloud::from_positions(vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let mut palette = default_palette();
        palette[0] = [0, 255, 255];
        let path = dir.path().join("out.ply");
        export_colored_ply(&cloud, &[0, UNLABELED], &palette, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let body: Vec<&str> = text.split("end_header\n").nth(1).unwrap().lines().collect();
        assert_eq!(body[0], "1.000000 2.000000 3.000000 0 255 255");
        assert_eq!(body[1], "4.000000 5.000000 6.000000 128 128 128");
        let (pos, colors) = read_colored_ply(&path).unwrap();
        assert_eq!(pos[1], [4.0, 5.0, 6.0]);
        assert_eq!(colors[1], UNLABELED_COLOR);
    }

    #[test]
    fn empty_ply_has_valid_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ply");
        export_colored_ply_points(&[], &[], &default_palette(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("element vertex 0\n"));
        assert!(text.ends_with("end_header\n"));
        let (pos, _) = read_colored_ply(&path).unwrap();
        assert!(pos.is_empty());
    }

    #[test]
    fn ply_to_unwritable_path_is_io_error() {
        let cloud = PointCloud::from_positions(vec![[0.0; 3]]).unwrap();
        let err = export_colored_ply(
            &cloud,
            &[0],
            &default_palette(),
            Path::new("/nonexistent-dir/x.ply"),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(PointCloud::from_positions(vec![]).is_err());
        assert!(PointCloud::from_positions(vec![[f64::NAN, 0.0, 0.0]]).is_err());
    }
}
