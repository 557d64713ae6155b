//! Continuous 7-DoF actions, the projection onto discretized translation /
//! rotation / gripper primitives, and the canonical sentence format that
//! names a primitive triple.
//!
//! Canonical sentence grammar:
//!
//! ```text
//! sentence    = translation ", " rotation ", and " gripper " the gripper"
//! translation = "stay in place" | "move " dist " meters " dir
//! rotation    = "keep orientation" | "rotate " angle " degrees around the " axis "-axis"
//! gripper     = "open" | "close"
//! dir         = "forward" | "backward" | "left" | "right" | "up" | "down"
//! axis        = ["-"] ("x" | "y" | "z")
//! dist, angle = a configured bin label, printed as the shortest decimal
//!               that round-trips the f64 value
//! ```

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActionError {
    #[error("action field `{0}` is not finite")]
    NonFinite(&'static str),
    #[error("expected 7 action values, got {0}")]
    Arity(usize),
    #[error("invalid binning config: {0}")]
    Config(String),
    #[error("{which} magnitude bin {bin} out of range (config has {bins} bins)")]
    BinOutOfRange { which: &'static str, bin: usize, bins: usize },
    #[error("no-motion {0} primitive must use magnitude bin 0")]
    IdleBin(&'static str),
    #[error("class index {index} out of range for {which} head with {classes} classes")]
    ClassOutOfRange { which: &'static str, index: usize, classes: usize },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("parse error at offset {offset}: {message}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gripper {
    Open,
    Close,
}

impl Gripper {
    /// Continuous gripper commands at or above 0.5 mean close.
    pub fn from_value(v: f64) -> Self {
        if v >= 0.5 {
            Gripper::Close
        } else {
            Gripper::Open
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Gripper::Open => 0.0,
            Gripper::Close => 1.0,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn word(self) -> &'static str {
        match self {
            Gripper::Open => "open",
            Gripper::Close => "close",
        }
    }
}

/// Signed axis. Declaration order is the tie-break priority of [`discretize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    PosX,
    NegX,
    PosY,
    NegY,
    PosZ,
    NegZ,
}

impl Direction {
    pub const ALL: [Direction; 6] = [
        Direction::PosX,
        Direction::NegX,
        Direction::PosY,
        Direction::NegY,
        Direction::PosZ,
        Direction::NegZ,
    ];

    pub fn from_axis(axis: usize, positive: bool) -> Self {
        Self::ALL[2 * axis + usize::from(!positive)]
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// 0, 1, 2 for x, y, z.
    pub fn axis(self) -> usize {
        self.index() / 2
    }

    pub fn sign(self) -> f64 {
        if self.index().is_multiple_of(2) {
            1.0
        } else {
            -1.0
        }
    }

    /// Translation direction word.
    pub fn motion_word(self) -> &'static str {
        match self {
            Direction::PosX => "forward",
            Direction::NegX => "backward",
            Direction::PosY => "left",
            Direction::NegY => "right",
            Direction::PosZ => "up",
            Direction::NegZ => "down",
        }
    }

    /// Rotation axis name, rendered as `{name}-axis`.
    pub fn axis_name(self) -> &'static str {
        match self {
            Direction::PosX => "x",
            Direction::NegX => "-x",
            Direction::PosY => "y",
            Direction::NegY => "-y",
            Direction::PosZ => "z",
            Direction::NegZ => "-z",
        }
    }
}

/// A 7-DoF end-effector delta: translation in meters, per-axis rotation in
/// degrees, binary gripper command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action7 {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
    pub g: Gripper,
}

impl Action7 {
    const FIELDS: [&'static str; 7] = ["dx", "dy", "dz", "rx", "ry", "rz", "g"];

    /// Builds an action from seven numbers; the last is thresholded at 0.5.
    pub fn from_slice(v: &[f64]) -> Result<Self, ActionError> {
        if v.len() != 7 {
            return Err(ActionError::Arity(v.len()));
        }
        if let Some(k) = v.iter().position(|x| !x.is_finite()) {
            return Err(ActionError::NonFinite(Self::FIELDS[k]));
        }
        Ok(Self {
            dx: v[0],
            dy: v[1],
            dz: v[2],
            rx: v[3],
            ry: v[4],
            rz: v[5],
            g: Gripper::from_value(v[6]),
        })
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.dx, self.dy, self.dz, self.rx, self.ry, self.rz, self.g.value()]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.dx, self.dy, self.dz]
    }

    pub fn rotation(&self) -> [f64; 3] {
        [self.rx, self.ry, self.rz]
    }

    pub fn validate(&self) -> Result<(), ActionError> {
        let vals = self.to_array();
        match vals[..6].iter().position(|x| !x.is_finite()) {
            Some(k) => Err(ActionError::NonFinite(Self::FIELDS[k])),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinningConfig {
    /// Translation no-motion threshold (m).
    pub epsilon_t: f64,
    /// Rotation no-motion threshold (deg).
    pub epsilon_r: f64,
    pub dist_edges: Vec<f64>,
    pub angle_edges: Vec<f64>,
    pub dist_labels: Vec<f64>,
    pub angle_labels: Vec<f64>,
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self {
            epsilon_t: 0.005,
            epsilon_r: 2.0,
            dist_edges: vec![0.02, 0.10],
            angle_edges: vec![15.0, 60.0],
            dist_labels: vec![0.01, 0.05, 0.5],
            angle_labels: vec![5.0, 30.0, 90.0],
        }
    }
}

fn validate_dimension(
    name: &str,
    eps: f64,
    edges: &[f64],
    labels: &[f64],
) -> Result<(), ActionError> {
    let bad = |msg: String| Err(ActionError::Config(format!("{name}: {msg}")));
    if !(eps > 0.0) || !eps.is_finite() {
        return bad(format!("threshold must be positive, got {eps}"));
    }
    if edges.iter().any(|e| !e.is_finite()) || labels.iter().any(|l| !l.is_finite()) {
        return bad("non-finite edge or label".into());
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return bad("edges must be strictly increasing".into());
    }
    if edges.first().is_some_and(|&e| e <= eps) {
        return bad("first edge must exceed the no-motion threshold".into());
    }
    if labels.len() != edges.len() + 1 {
        return bad(format!("{} labels for {} edges", labels.len(), edges.len()));
    }
    for (k, &l) in labels.iter().enumerate() {
        let (lo, hi) = bin_bounds(eps, edges, k);
        if !(l >= lo && l < hi) {
            return bad(format!("label {l} lies outside its bin [{lo}, {hi})"));
        }
    }
    let rendered: std::collections::BTreeSet<String> = labels.iter().map(|l| format_label(*l)).collect();
    if rendered.len() != labels.len() {
        return bad("labels must be distinct".into());
    }
    Ok(())
}

/// Half-open magnitude interval `[lo, hi)` covered by bin `k`.
fn bin_bounds(eps: f64, edges: &[f64], k: usize) -> (f64, f64) {
    let lo = if k == 0 { eps } else { edges[k - 1] };
    let hi = edges.get(k).copied().unwrap_or(f64::INFINITY);
    (lo, hi)
}

fn format_label(v: f64) -> String {
    format!("{v}")
}

/// Selects the translation or rotation half of a [`BinningConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    Translation,
    Rotation,
}

impl Component {
    fn name(self) -> &'static str {
        match self {
            Component::Translation => "translation",
            Component::Rotation => "rotation",
        }
    }
}

impl BinningConfig {
    pub fn validate(&self) -> Result<(), ActionError> {
        validate_dimension("translation", self.epsilon_t, &self.dist_edges, &self.dist_labels)?;
        validate_dimension("rotation", self.epsilon_r, &self.angle_edges, &self.angle_labels)
    }

    pub fn epsilon(&self, c: Component) -> f64 {
        match c {
            Component::Translation => self.epsilon_t,
            Component::Rotation => self.epsilon_r,
        }
    }

    pub fn edges(&self, c: Component) -> &[f64] {
        match c {
            Component::Translation => &self.dist_edges,
            Component::Rotation => &self.angle_edges,
        }
    }

    pub fn labels(&self, c: Component) -> &[f64] {
        match c {
            Component::Translation => &self.dist_labels,
            Component::Rotation => &self.angle_labels,
        }
    }

    /// Number of magnitude bins for a moving primitive.
    pub fn bins(&self, c: Component) -> usize {
        self.labels(c).len()
    }

    /// Magnitude interval `[lo, hi)` of a bin.
    pub fn bin_bounds(&self, c: Component, bin: usize) -> (f64, f64) {
        bin_bounds(self.epsilon(c), self.edges(c), bin)
    }

    /// Class counts of the translation, rotation and gripper heads.
    pub fn class_counts(&self) -> (usize, usize, usize) {
        (
            1 + 6 * self.bins(Component::Translation),
            1 + 6 * self.bins(Component::Rotation),
            2,
        )
    }

    /// Every token that can occur in a canonical sentence, in a fixed order.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut words: Vec<String> = [
            "move", "meters", "stay", "in", "place", "rotate", "degrees", "around", "the", "keep",
            "orientation", "and", "open", "close", "gripper",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        words.extend(Direction::ALL.iter().map(|d| d.motion_word().to_string()));
        words.extend(Direction::ALL.iter().map(|d| format!("{}-axis", d.axis_name())));
        words.extend(self.dist_labels.iter().map(|l| format_label(*l)));
        words.extend(self.angle_labels.iter().map(|l| format_label(*l)));
        let mut seen = std::collections::HashSet::new();
        words.retain(|w| seen.insert(w.clone()));
        words
    }
}

/// One continuous primitive: a signed dominant axis and a magnitude bin, or
/// no motion (`dir = None`, `mag_bin = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Primitive {
    pub dir: Option<Direction>,
    pub mag_bin: usize,
}

impl Primitive {
    pub const IDLE: Primitive = Primitive { dir: None, mag_bin: 0 };

    pub fn moving(dir: Direction, mag_bin: usize) -> Self {
        Self { dir: Some(dir), mag_bin }
    }

    fn validate(&self, cfg: &BinningConfig, c: Component) -> Result<(), ActionError> {
        match self.dir {
            None if self.mag_bin != 0 => Err(ActionError::IdleBin(c.name())),
            None => Ok(()),
            Some(_) if self.mag_bin >= cfg.bins(c) => Err(ActionError::BinOutOfRange {
                which: c.name(),
                bin: self.mag_bin,
                bins: cfg.bins(c),
            }),
            Some(_) => Ok(()),
        }
    }

    /// Flat class id: 0 for no motion, else `1 + dir·bins + mag_bin`.
    pub fn class_index(&self, bins: usize) -> usize {
        match self.dir {
            None => 0,
            Some(d) => 1 + d.index() * bins + self.mag_bin,
        }
    }

    pub fn from_class_index(idx: usize, bins: usize) -> Option<Self> {
        if idx == 0 {
            return Some(Self::IDLE);
        }
        let k = idx - 1;
        let dir = *Direction::ALL.get(k / bins)?;
        Some(Self::moving(dir, k % bins))
    }

    /// Signed 3-vector sitting on the bin's representative value.
    pub fn center(&self, cfg: &BinningConfig, c: Component) -> [f64; 3] {
        let mut v = [0.0; 3];
        if let Some(d) = self.dir {
            v[d.axis()] = d.sign() * cfg.labels(c)[self.mag_bin];
        }
        v
    }
}

/// The discretized `(ΔT, ΔR, G)` decomposition of an action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PrimitiveTriple {
    pub trans: Primitive,
    pub rot: Primitive,
    pub grip: Gripper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassIndices {
    pub t: usize,
    pub r: usize,
    pub g: usize,
}

impl PrimitiveTriple {
    pub fn validate(&self, cfg: &BinningConfig) -> Result<(), ActionError> {
        self.trans.validate(cfg, Component::Translation)?;
        self.rot.validate(cfg, Component::Rotation)
    }

    pub fn component(&self, c: Component) -> Primitive {
        match c {
            Component::Translation => self.trans,
            Component::Rotation => self.rot,
        }
    }

    /// The noise-free action that sits on every bin's representative value.
    pub fn center_action(&self, cfg: &BinningConfig) -> Action7 {
        let t = self.trans.center(cfg, Component::Translation);
        let r = self.rot.center(cfg, Component::Rotation);
        Action7 { dx: t[0], dy: t[1], dz: t[2], rx: r[0], ry: r[1], rz: r[2], g: self.grip }
    }
}

fn discretize_component(v: [f64; 3], cfg: &BinningConfig, c: Component) -> Primitive {
    let mut best = 0;
    for k in 1..3 {
        if v[k].abs() > v[best].abs() {
            best = k;
        }
    }
    let mag = v[best].abs();
    if mag < cfg.epsilon(c) {
        return Primitive::IDLE;
    }
    let bin = cfg.edges(c).iter().filter(|&&e| mag >= e).count();
    Primitive::moving(Direction::from_axis(best, v[best] > 0.0), bin)
}

/// Projects an action onto its primitive triple.
///
/// Each continuous primitive keeps only its dominant axis; ties resolve to
/// the earlier axis (x before y before z).
pub fn discretize(action: &Action7, cfg: &BinningConfig) -> Result<PrimitiveTriple, ActionError> {
    action.validate()?;
    Ok(PrimitiveTriple {
        trans: discretize_component(action.translation(), cfg, Component::Translation),
        rot: discretize_component(action.rotation(), cfg, Component::Rotation),
        grip: action.g,
    })
}

pub fn render_language(p: &PrimitiveTriple, cfg: &BinningConfig) -> Result<String, ActionError> {
    p.validate(cfg)?;
    let trans = match p.trans.dir {
        None => "stay in place".to_string(),
        Some(d) => format!(
            "move {} meters {}",
            format_label(cfg.dist_labels[p.trans.mag_bin]),
            d.motion_word()
        ),
    };
    let rot = match p.rot.dir {
        None => "keep orientation".to_string(),
        Some(d) => format!(
            "rotate {} degrees around the {}-axis",
            format_label(cfg.angle_labels[p.rot.mag_bin]),
            d.axis_name()
        ),
    };
    Ok(format!("{trans}, {rot}, and {} the gripper", p.grip.word()))
}

pub fn class_indices(p: &PrimitiveTriple, cfg: &BinningConfig) -> Result<ClassIndices, ActionError> {
    p.validate(cfg)?;
    Ok(ClassIndices {
        t: p.trans.class_index(cfg.bins(Component::Translation)),
        r: p.rot.class_index(cfg.bins(Component::Rotation)),
        g: p.grip.index(),
    })
}

pub fn triple_from_indices(idx: ClassIndices, cfg: &BinningConfig) -> Result<PrimitiveTriple, ActionError> {
    let (nt, nr, ng) = cfg.class_counts();
    let check = |which, index, classes| {
        if index < classes {
            Ok(())
        } else {
            Err(ActionError::ClassOutOfRange { which, index, classes })
        }
    };
    check("translation", idx.t, nt)?;
    check("rotation", idx.r, nr)?;
    check("gripper", idx.g, ng)?;
    Ok(PrimitiveTriple {
        trans: Primitive::from_class_index(idx.t, cfg.bins(Component::Translation)).expect("checked"),
        rot: Primitive::from_class_index(idx.r, cfg.bins(Component::Rotation)).expect("checked"),
        grip: if idx.g == 0 { Gripper::Open } else { Gripper::Close },
    })
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError { offset: self.pos, message: message.into() })
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn eat(&mut self, lit: &str) -> bool {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, lit: &str) -> Result<(), ParseError> {
        if self.eat(lit) {
            Ok(())
        } else {
            self.err(format!("expected {lit:?}"))
        }
    }

    /// Consumes up to (not including) the first char in `stops`, or to the end.
    fn word(&mut self, stops: &[char]) -> &'a str {
        let rest = self.rest();
        let n = rest.find(|c| stops.contains(&c)).unwrap_or(rest.len());
        self.pos += n;
        &rest[..n]
    }

    fn label(&mut self, labels: &[f64], what: &str) -> Result<usize, ParseError> {
        let start = self.pos;
        let tok = self.word(&[' ', ',']);
        match labels.iter().position(|l| format_label(*l) == tok) {
            Some(k) => Ok(k),
            None => Err(ParseError {
                offset: start,
                message: format!("unlabeled {what} magnitude {tok:?}"),
            }),
        }
    }
}

/// Inverse of [`render_language`]. Surrounding whitespace is ignored;
/// error offsets index into the original string.
pub fn parse_language(text: &str, cfg: &BinningConfig) -> Result<PrimitiveTriple, ParseError> {
    let body = text.trim_end();
    let lead = body.len() - body.trim_start().len();
    let mut cur = Cursor { src: body, pos: lead };
    if cur.rest().is_empty() {
        return cur.err("empty sentence");
    }

    let trans = if cur.eat("stay in place") {
        Primitive::IDLE
    } else if cur.eat("move ") {
        let bin = cur.label(&cfg.dist_labels, "distance")?;
        cur.expect(" meters ")?;
        let start = cur.pos;
        let tok = cur.word(&[',']);
        match Direction::ALL.iter().find(|d| d.motion_word() == tok) {
            Some(&d) => Primitive::moving(d, bin),
            None => {
                return Err(ParseError { offset: start, message: format!("unknown direction {tok:?}") })
            }
        }
    } else {
        return cur.err("expected \"move \" or \"stay in place\"");
    };
    cur.expect(", ")?;

    let rot = if cur.eat("keep orientation") {
        Primitive::IDLE
    } else if cur.eat("rotate ") {
        let bin = cur.label(&cfg.angle_labels, "angle")?;
        cur.expect(" degrees around the ")?;
        let start = cur.pos;
        let tok = cur.word(&[',']);
        let axis = tok.strip_suffix("-axis").and_then(|a| Direction::ALL.iter().find(|d| d.axis_name() == a));
        match axis {
            Some(&d) => Primitive::moving(d, bin),
            None => return Err(ParseError { offset: start, message: format!("unknown axis {tok:?}") }),
        }
    } else {
        return cur.err("expected \"rotate \" or \"keep orientation\"");
    };
    cur.expect(", and ")?;

    let grip = if cur.eat("open") {
        Gripper::Open
    } else if cur.eat("close") {
        Gripper::Close
    } else {
        return cur.err("expected \"open\" or \"close\"");
    };
    cur.expect(" the gripper")?;
    if !cur.rest().is_empty() {
        return cur.err("trailing characters");
    }
    Ok(PrimitiveTriple { trans, rot, grip })
}

impl fmt::Display for PrimitiveTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let part = |p: Primitive| match p.dir {
            None => "none".to_string(),
            Some(d) => format!("{d:?}/{}", p.mag_bin),
        };
        write!(f, "({}, {}, {:?})", part(self.trans), part(self.rot), self.grip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const REFERENCE_SENTENCE: &str =
        "move 0.5 meters forward, rotate 90 degrees around the z-axis, and close the gripper";

    fn act(v: [f64; 7]) -> Action7 {
        Action7::from_slice(&v).unwrap()
    }

    #[test]
    fn default_config_is_valid() {
        BinningConfig::default().validate().unwrap();
    }

    #[test]
    fn config_validation_catches_bad_edges_and_labels() {
        let mut cfg = BinningConfig::default();
        cfg.dist_edges = vec![0.1, 0.02];
        assert!(cfg.validate().is_err());
        let mut cfg = BinningConfig::default();
        cfg.angle_labels.pop();
        assert!(cfg.validate().is_err());
        let mut cfg = BinningConfig::default();
        cfg.epsilon_r = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = BinningConfig::default();
        cfg.dist_labels[0] = 0.03;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = BinningConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<BinningConfig>(&s).unwrap(), cfg);
    }

    #[test]
    fn discretizes_the_reference_action() {
        let cfg = BinningConfig::default();
        let p = discretize(&act([0.5, 0.0, 0.0, 0.0, 0.0, 90.0, 1.0]), &cfg).unwrap();
        assert_eq!(p.trans, Primitive::moving(Direction::PosX, 2));
        assert_eq!(p.rot, Primitive::moving(Direction::PosZ, 2));
        assert_eq!(p.grip, Gripper::Close);
        assert_eq!(render_language(&p, &cfg).unwrap(), REFERENCE_SENTENCE);
        assert_eq!(parse_language(REFERENCE_SENTENCE, &cfg).unwrap(), p);
    }

    #[test]
    fn idle_action() {
        let cfg = BinningConfig::default();
        let p = discretize(&act([0.0; 7]), &cfg).unwrap();
        assert_eq!(p, PrimitiveTriple { trans: Primitive::IDLE, rot: Primitive::IDLE, grip: Gripper::Open });
        assert_eq!(render_language(&p, &cfg).unwrap(), "stay in place, keep orientation, and open the gripper");
        assert_eq!(class_indices(&p, &cfg).unwrap(), ClassIndices { t: 0, r: 0, g: 0 });
    }

    #[test]
    fn sub_threshold_motion_is_idle() {
        let cfg = BinningConfig::default();
        let p = discretize(&act([0.004, -0.0049, 0.0, 1.9, 0.0, -1.99, 0.0]), &cfg).unwrap();
        assert_eq!(p.trans, Primitive::IDLE);
        assert_eq!(p.rot, Primitive::IDLE);
    }

    #[test]
    fn two_way_ties_follow_priority_order() {
        // Oracle: the winner of a tie is whichever signed direction comes
        // first in the list below.
        let priority = ["+x", "-x", "+y", "-y", "+z", "-z"];
        let cfg = BinningConfig::default();
        for m in [0.01, 0.1, 0.5] {
            for a in 0..6 {
                for b in 0..6 {
                    if a / 2 == b / 2 {
                        continue;
                    }
                    let mut v = [0.0; 7];
                    for &k in &[a, b] {
                        v[k / 2] = if k % 2 == 0 { m } else { -m };
                    }
                    let expected = priority[a.min(b)];
                    let got = discretize(&act(v), &cfg).unwrap().trans.dir.unwrap();
                    let name = format!("{}{}", if got.sign() > 0.0 { "+" } else { "-" }, ["x", "y", "z"][got.axis()]);
                    assert_eq!(name, expected, "tie between {} and {}", priority[a], priority[b]);
                }
            }
        }
        let p = discretize(&act([0.1, -0.1, 0.0, 0.0, 0.0, 0.0, 0.0]), &cfg).unwrap();
        assert_eq!(p.trans.dir, Some(Direction::PosX));
    }

    #[test]
    fn bin_edges_are_lower_inclusive() {
        let cfg = BinningConfig::default();
        let bin = |x: f64| discretize(&act([x, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]), &cfg).unwrap().trans;
        assert_eq!(bin(0.005).mag_bin, 0);
        assert_eq!(bin(0.0199).mag_bin, 0);
        assert_eq!(bin(0.02).mag_bin, 1);
        assert_eq!(bin(0.10).mag_bin, 2);
        assert_eq!(bin(-3.0), Primitive::moving(Direction::NegX, 2));
    }

    #[test]
    fn rejects_non_finite_fields() {
        let cfg = BinningConfig::default();
        let a = Action7 { dx: 0.0, dy: 0.0, dz: 0.0, rx: f64::NAN, ry: 0.0, rz: 0.0, g: Gripper::Open };
        assert_eq!(discretize(&a, &cfg), Err(ActionError::NonFinite("rx")));
        assert_eq!(
            Action7::from_slice(&[0.0, f64::INFINITY, 0.0, 0.0, 0.0, 0.0, 0.0]),
            Err(ActionError::NonFinite("dy"))
        );
        assert_eq!(Action7::from_slice(&[0.0; 6]), Err(ActionError::Arity(6)));
    }

    #[test]
    fn gripper_threshold() {
        assert_eq!(Gripper::from_value(0.49), Gripper::Open);
        assert_eq!(Gripper::from_value(0.5), Gripper::Close);
    }

    #[test]
    fn render_rejects_out_of_range_bins() {
        let cfg = BinningConfig::default();
        let mut p = discretize(&act([0.5, 0.0, 0.0, 0.0, 0.0, 90.0, 1.0]), &cfg).unwrap();
        p.trans.mag_bin = 3;
        assert!(matches!(render_language(&p, &cfg), Err(ActionError::BinOutOfRange { .. })));
        p.trans = Primitive { dir: None, mag_bin: 1 };
        assert_eq!(render_language(&p, &cfg), Err(ActionError::IdleBin("translation")));
    }

    #[test]
    fn negative_rotation_axes_render() {
        let cfg = BinningConfig::default();
        let p = discretize(&act([0.0, 0.0, -0.05, 0.0, -20.0, 0.0, 0.0]), &cfg).unwrap();
        let s = render_language(&p, &cfg).unwrap();
        assert_eq!(s, "move 0.05 meters down, rotate 30 degrees around the -y-axis, and open the gripper");
        assert_eq!(parse_language(&s, &cfg).unwrap(), p);
    }

    #[test]
    fn parse_errors_carry_offsets() {
        let cfg = BinningConfig::default();
        assert_eq!(parse_language("", &cfg).unwrap_err().offset, 0);
        assert_eq!(parse_language("  \n", &cfg).unwrap_err().offset, 0);
        let e = parse_language("move 0.5 meters sideways, keep orientation, and open the gripper", &cfg).unwrap_err();
        assert_eq!(e.offset, 16);
        assert!(e.message.contains("direction"));
        let e = parse_language("move 0.7 meters up, keep orientation, and open the gripper", &cfg).unwrap_err();
        assert_eq!(e.offset, 5);
        let e = parse_language("stay in place, rotate 5 degrees around the w-axis, and open the gripper", &cfg)
            .unwrap_err();
        assert_eq!(e.offset, 43);
        let e = parse_language("stay in place, keep orientation, and open the gripper.", &cfg).unwrap_err();
        assert_eq!(e.offset, 53);
        let e = parse_language("stay in place; keep orientation, and open the gripper", &cfg).unwrap_err();
        assert_eq!(e.offset, 13);
    }

    #[test]
    fn parse_tolerates_surrounding_whitespace_only() {
        let cfg = BinningConfig::default();
        let p = parse_language(&format!("  \t{REFERENCE_SENTENCE}\n"), &cfg).unwrap();
        assert_eq!(render_language(&p, &cfg).unwrap(), REFERENCE_SENTENCE);
        assert!(parse_language(&REFERENCE_SENTENCE.replace("move ", "move  "), &cfg).is_err());
        assert!(parse_language(&REFERENCE_SENTENCE.to_uppercase(), &cfg).is_err());
    }

    #[test]
    fn default_class_counts_by_enumeration() {
        let cfg = BinningConfig::default();
        let mut seen = std::collections::HashSet::new();
        let mut prims = vec![Primitive::IDLE];
        for d in Direction::ALL {
            for b in 0..3 {
                prims.push(Primitive::moving(d, b));
            }
        }
        for &t in &prims {
            for &r in &prims {
                for g in [Gripper::Open, Gripper::Close] {
                    let idx = class_indices(&PrimitiveTriple { trans: t, rot: r, grip: g }, &cfg).unwrap();
                    seen.insert(idx);
                }
            }
        }
        let max = |f: fn(&ClassIndices) -> usize| seen.iter().map(f).max().unwrap() + 1;
        assert_eq!((max(|i| i.t), max(|i| i.r), max(|i| i.g)), (19, 19, 2));
        assert_eq!(seen.len(), 19 * 19 * 2);
        assert_eq!(cfg.class_counts(), (19, 19, 2));
    }

    #[test]
    fn class_indices_are_bijective() {
        let cfg = BinningConfig::default();
        let (nt, nr, ng) = cfg.class_counts();
        for t in 0..nt {
            for r in 0..nr {
                for g in 0..ng {
                    let idx = ClassIndices { t, r, g };
                    let p = triple_from_indices(idx, &cfg).unwrap();
                    assert_eq!(class_indices(&p, &cfg).unwrap(), idx);
                }
            }
        }
        assert!(triple_from_indices(ClassIndices { t: 19, r: 0, g: 0 }, &cfg).is_err());
    }

    #[test]
    fn vocabulary_covers_every_sentence() {
        let cfg = BinningConfig::default();
        let vocab: std::collections::HashSet<String> = cfg.vocabulary().into_iter().collect();
        let (nt, nr, ng) = cfg.class_counts();
        for t in 0..nt {
            for r in 0..nr {
                for g in 0..ng {
                    let p = triple_from_indices(ClassIndices { t, r, g }, &cfg).unwrap();
                    let s = render_language(&p, &cfg).unwrap();
                    for tok in s.split_whitespace() {
                        assert!(vocab.contains(tok.trim_end_matches(',')), "{tok}");
                    }
                }
            }
        }
    }

    fn arb_triple() -> impl Strategy<Value = PrimitiveTriple> {
        (0usize..19, 0usize..19, 0usize..2).prop_map(|(t, r, g)| {
            triple_from_indices(ClassIndices { t, r, g }, &BinningConfig::default()).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

        #[test]
        fn render_parse_round_trip(p in arb_triple()) {
            let cfg = BinningConfig::default();
            let s = render_language(&p, &cfg).unwrap();
            prop_assert_eq!(parse_language(&s, &cfg).unwrap(), p);
        }

        #[test]
        fn perturbation_inside_bin_keeps_triple(
            p in arb_triple(),
            ft in 0.0f64..1.0,
            fr in 0.0f64..1.0,
            minor in -0.99f64..0.99,
        ) {
            let cfg = BinningConfig::default();
            let mut a = p.center_action(&cfg);
            let mut moved = [a.dx, a.dy, a.dz, a.rx, a.ry, a.rz];
            for (c, f, off) in [(Component::Translation, ft, 0), (Component::Rotation, fr, 3)] {
                let prim = p.component(c);
                if let Some(d) = prim.dir {
                    let (lo, hi) = cfg.bin_bounds(c, prim.mag_bin);
                    let hi = if hi.is_finite() { hi } else { lo * 10.0 };
                    let mag = lo + f * (hi - lo) * 0.999;
                    moved[off + d.axis()] = d.sign() * mag;
                    let other = (d.axis() + 1) % 3;
                    moved[off + other] = minor * mag;
                }
            }
            a = Action7 { dx: moved[0], dy: moved[1], dz: moved[2], rx: moved[3], ry: moved[4], rz: moved[5], g: a.g };
            prop_assert_eq!(discretize(&a, &cfg).unwrap(), p);
        }
    }
}
