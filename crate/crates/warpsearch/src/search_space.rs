//! Genome encodings for the two searchable networks.
//!
//! The warping network is five cells, each holding one to three blocks drawn
//! from a four-operation set.  The fusion network is a U-Net whose genome
//! picks, per resolution level, a skip source, a downsampling kernel, and an
//! upsampling kernel.  Both genomes have a canonical text form used in
//! manifests, search records, and the `finetune --genome` flag.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

/// Behaviour an evolutionary search needs from a genome.
pub trait Genome: Clone + Eq + std::hash::Hash + fmt::Display {
    fn sample<R: Rng>(rng: &mut R) -> Self;
    /// Resample each gene independently with probability `per_gene_prob`,
    /// drawing uniformly from that gene's full domain.
    fn mutate<R: Rng>(&self, rng: &mut R, per_gene_prob: f64) -> Self;
    /// Uniform structural crossover: each slot is copied whole from one of
    /// the two parents, chosen uniformly.
    fn crossover<R: Rng>(a: &Self, b: &Self, rng: &mut R) -> Self;
}

/// Number of cells in the warping network.
pub const WARP_CELLS: usize = 5;
/// Most blocks a single warp cell may hold.
pub const MAX_BLOCKS_PER_CELL: usize = 3;

/// One operation choice for a warp block.
///
/// Codes follow the established order: 0 and 1 are standard convolutions
/// (1x1, 3x3), 2 and 3 are depthwise-separable convolutions (1x1, 3x3).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WarpOp {
    Conv1x1 = 0,
    Conv3x3 = 1,
    Sep1x1 = 2,
    Sep3x3 = 3,
}

impl WarpOp {
    pub const ALL: [WarpOp; 4] = [WarpOp::Conv1x1, WarpOp::Conv3x3, WarpOp::Sep1x1, WarpOp::Sep3x3];

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(WarpOp::Conv1x1),
            1 => Ok(WarpOp::Conv3x3),
            2 => Ok(WarpOp::Sep1x1),
            3 => Ok(WarpOp::Sep3x3),
            other => Err(Error::Genome(format!("op code {other} not in 0..=3"))),
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn kernel(self) -> usize {
        match self {
            WarpOp::Conv1x1 | WarpOp::Sep1x1 => 1,
            WarpOp::Conv3x3 | WarpOp::Sep3x3 => 3,
        }
    }

    pub fn depthwise_separable(self) -> bool {
        matches!(self, WarpOp::Sep1x1 | WarpOp::Sep3x3)
    }

    fn sample<R: Rng>(rng: &mut R) -> Self {
        Self::ALL[rng.random_range(0..4)]
    }
}

/// One warp cell: an ordered list of one to three block operations.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CellGenome {
    ops: Vec<WarpOp>,
}

impl CellGenome {
    pub fn new(ops: Vec<WarpOp>) -> Result<Self> {
        if ops.is_empty() || ops.len() > MAX_BLOCKS_PER_CELL {
            return Err(Error::Genome(format!(
                "cell must hold 1..={MAX_BLOCKS_PER_CELL} blocks, got {}",
                ops.len()
            )));
        }
        Ok(CellGenome { ops })
    }

    pub fn ops(&self) -> &[WarpOp] {
        &self.ops
    }

    pub fn n_blocks(&self) -> usize {
        self.ops.len()
    }

    fn sample<R: Rng>(rng: &mut R) -> Self {
        let n = rng.random_range(1..=MAX_BLOCKS_PER_CELL);
        CellGenome {
            ops: (0..n).map(|_| WarpOp::sample(rng)).collect(),
        }
    }

    /// Genes: the block count plus each active op slot.
    fn mutate<R: Rng>(&self, rng: &mut R, p: f64) -> Self {
        let mut ops = self.ops.clone();
        if rng.random_bool(p) {
            let n = rng.random_range(1..=MAX_BLOCKS_PER_CELL);
            ops.truncate(n);
            while ops.len() < n {
                ops.push(WarpOp::sample(rng));
            }
        }
        for op in ops.iter_mut() {
            if rng.random_bool(p) {
                *op = WarpOp::sample(rng);
            }
        }
        CellGenome { ops }
    }
}

/// Architecture of the warping network: one genome per cell, five cells.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WarpGenome {
    cells: Vec<CellGenome>,
}

impl WarpGenome {
    pub fn new(cells: Vec<CellGenome>) -> Result<Self> {
        if cells.len() != WARP_CELLS {
            return Err(Error::Genome(format!(
                "warp genome needs exactly {WARP_CELLS} cells, got {}",
                cells.len()
            )));
        }
        Ok(WarpGenome { cells })
    }

    pub fn cells(&self) -> &[CellGenome] {
        &self.cells
    }

    /// Baseline architecture: every cell a single 3x3 standard conv block.
    pub fn uniform_baseline() -> Self {
        WarpGenome {
            cells: (0..WARP_CELLS)
                .map(|_| CellGenome {
                    ops: vec![WarpOp::Conv3x3],
                })
                .collect(),
        }
    }

    /// Parse the canonical text form, e.g. `(0,2,1) (0) (2) (2,1) (1,3)`.
    pub fn parse(text: &str) -> Result<Self> {
        let bytes = text.as_bytes();
        let mut cells = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            match bytes[i] {
                b' ' | b'\t' | b'\n' | b'\r' => i += 1,
                b'(' => {
                    let start = i;
                    let end = text[i..].find(')').map(|o| i + o).ok_or(Error::GenomeParse {
                        position: start,
                        message: "unclosed '('".to_string(),
                    })?;
                    let inner = &text[i + 1..end];
                    let mut ops = Vec::new();
                    for (oi, tok) in inner.split(',').enumerate() {
                        let tok = tok.trim();
                        let code: u8 = tok.parse().map_err(|_| Error::GenomeParse {
                            position: start + 1,
                            message: format!("op {oi} is not a digit: {tok:?}"),
                        })?;
                        ops.push(WarpOp::from_code(code).map_err(|e| Error::GenomeParse {
                            position: start + 1,
                            message: e.to_string(),
                        })?);
                    }
                    cells.push(CellGenome::new(ops).map_err(|e| Error::GenomeParse {
                        position: start,
                        message: e.to_string(),
                    })?);
                    i = end + 1;
                }
                other => {
                    return Err(Error::GenomeParse {
                        position: i,
                        message: format!("expected '(' or whitespace, found {:?}", other as char),
                    })
                }
            }
        }
        Self::new(cells)
    }
}

impl fmt::Display for WarpGenome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, cell) in self.cells.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "(")?;
            for (j, op) in cell.ops.iter().enumerate() {
                if j > 0 {
                    write!(f, ",")?;
                }
                write!(f, "{}", op.code())?;
            }
            write!(f, ")")?;
        }
        Ok(())
    }
}

impl Genome for WarpGenome {
    fn sample<R: Rng>(rng: &mut R) -> Self {
        WarpGenome {
            cells: (0..WARP_CELLS).map(|_| CellGenome::sample(rng)).collect(),
        }
    }

    fn mutate<R: Rng>(&self, rng: &mut R, p: f64) -> Self {
        WarpGenome {
            cells: self.cells.iter().map(|c| c.mutate(rng, p)).collect(),
        }
    }

    fn crossover<R: Rng>(a: &Self, b: &Self, rng: &mut R) -> Self {
        WarpGenome {
            cells: a
                .cells
                .iter()
                .zip(b.cells.iter())
                .map(|(ca, cb)| if rng.random_bool(0.5) { ca.clone() } else { cb.clone() })
                .collect(),
        }
    }
}

/// Distinct configurations of a single warp cell: `4 + 4^2 + 4^3`.
pub fn warp_cell_configs() -> u64 {
    (1..=MAX_BLOCKS_PER_CELL as u32).map(|b| 4u64.pow(b)).sum()
}

/// Distinct warp genomes: `84^5`.
pub fn warp_space_size() -> u64 {
    warp_cell_configs().pow(WARP_CELLS as u32)
}

/// Skip-connection source for one fusion decoder level.
///
/// `Same` reads the encoder feature at the level's own resolution,
/// `Previous` the next-deeper encoder feature, `Next` the next-shallower
/// one.  At the shallowest level `Next` collapses to `Same`, and at the
/// deepest level `Previous` collapses to `Same`; see
/// [`FusionGenome::canonicalize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SkipChoice {
    Same,
    Previous,
    Next,
}

impl SkipChoice {
    pub const ALL: [SkipChoice; 3] = [SkipChoice::Same, SkipChoice::Previous, SkipChoice::Next];

    fn letter(self) -> char {
        match self {
            SkipChoice::Same => 's',
            SkipChoice::Previous => 'p',
            SkipChoice::Next => 'n',
        }
    }

    fn from_letter(c: char) -> Option<Self> {
        match c {
            's' => Some(SkipChoice::Same),
            'p' => Some(SkipChoice::Previous),
            'n' => Some(SkipChoice::Next),
            _ => None,
        }
    }
}

pub const FUSION_DOWN_KERNELS: [usize; 3] = [3, 4, 5];
pub const FUSION_UP_KERNELS: [usize; 2] = [3, 5];

/// Per-level genes of the fusion network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FusionLevelGene {
    pub skip: SkipChoice,
    /// Stride-2 encoder kernel: 3, 4, or 5.
    pub down_kernel: usize,
    /// Post-upsampling decoder kernel: 3 or 5.
    pub up_kernel: usize,
}

impl FusionLevelGene {
    fn validate(&self) -> Result<()> {
        if !FUSION_DOWN_KERNELS.contains(&self.down_kernel) {
            return Err(Error::Genome(format!(
                "down kernel {} not in {FUSION_DOWN_KERNELS:?}",
                self.down_kernel
            )));
        }
        if !FUSION_UP_KERNELS.contains(&self.up_kernel) {
            return Err(Error::Genome(format!(
                "up kernel {} not in {FUSION_UP_KERNELS:?}",
                self.up_kernel
            )));
        }
        Ok(())
    }

    fn sample<R: Rng>(rng: &mut R) -> Self {
        FusionLevelGene {
            skip: SkipChoice::ALL[rng.random_range(0..3)],
            down_kernel: FUSION_DOWN_KERNELS[rng.random_range(0..3)],
            up_kernel: FUSION_UP_KERNELS[rng.random_range(0..2)],
        }
    }
}

/// Architecture of the fusion U-Net: one gene set per resolution level,
/// shallow (level 0, full resolution after one halving) to deep.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FusionGenome {
    levels: Vec<FusionLevelGene>,
}

/// Level counts the fusion ladder supports: five nominally, four at short
/// input heights.
pub const FUSION_LEVEL_COUNTS: [usize; 2] = [4, 5];

impl FusionGenome {
    pub fn new(levels: Vec<FusionLevelGene>) -> Result<Self> {
        if !FUSION_LEVEL_COUNTS.contains(&levels.len()) {
            return Err(Error::Genome(format!(
                "fusion genome needs {FUSION_LEVEL_COUNTS:?} levels, got {}",
                levels.len()
            )));
        }
        for l in &levels {
            l.validate()?;
        }
        Ok(FusionGenome { levels })
    }

    pub fn levels(&self) -> &[FusionLevelGene] {
        &self.levels
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    /// The plain U-Net inside the space: every skip `Same`, every down
    /// kernel 3, every up kernel 3.
    pub fn plain_unet(n_levels: usize) -> Result<Self> {
        Self::new(
            (0..n_levels)
                .map(|_| FusionLevelGene {
                    skip: SkipChoice::Same,
                    down_kernel: 3,
                    up_kernel: 3,
                })
                .collect(),
        )
    }

    /// Rewrite out-of-range skip choices at the boundary levels to their
    /// structural equivalents: level 0 `Next` becomes `Same`, deepest level
    /// `Previous` becomes `Same`.
    pub fn canonicalize(mut self) -> Self {
        let last = self.levels.len() - 1;
        if self.levels[0].skip == SkipChoice::Next {
            self.levels[0].skip = SkipChoice::Same;
        }
        if self.levels[last].skip == SkipChoice::Previous {
            self.levels[last].skip = SkipChoice::Same;
        }
        self
    }

    pub fn is_canonical(&self) -> bool {
        let last = self.levels.len() - 1;
        self.levels[0].skip != SkipChoice::Next && self.levels[last].skip != SkipChoice::Previous
    }

    /// Parse the canonical text form, e.g.
    /// `skip=(s,p,n,s) down=(3,4,5,3) up=(3,5,3,5)`.
    pub fn parse(text: &str) -> Result<Self> {
        fn group<'a>(text: &'a str, key: &str) -> Result<(usize, Vec<&'a str>)> {
            let kpos = text.find(&format!("{key}=(")).ok_or_else(|| Error::GenomeParse {
                position: 0,
                message: format!("missing `{key}=(...)` group"),
            })?;
            let start = kpos + key.len() + 2;
            let end = text[start..].find(')').map(|o| start + o).ok_or(Error::GenomeParse {
                position: start,
                message: format!("unclosed `{key}=(`"),
            })?;
            Ok((start, text[start..end].split(',').map(str::trim).collect()))
        }

        let (spos, skips) = group(text, "skip")?;
        let (dpos, downs) = group(text, "down")?;
        let (upos, ups) = group(text, "up")?;
        if skips.len() != downs.len() || downs.len() != ups.len() {
            return Err(Error::GenomeParse {
                position: 0,
                message: format!(
                    "group lengths disagree: skip {}, down {}, up {}",
                    skips.len(),
                    downs.len(),
                    ups.len()
                ),
            });
        }
        let mut levels = Vec::with_capacity(skips.len());
        for i in 0..skips.len() {
            let sc = skips[i];
            let skip = sc
                .chars()
                .next()
                .filter(|_| sc.len() == 1)
                .and_then(SkipChoice::from_letter)
                .ok_or(Error::GenomeParse {
                    position: spos,
                    message: format!("skip {i} must be one of s/p/n, got {sc:?}"),
                })?;
            let down_kernel: usize = downs[i].parse().map_err(|_| Error::GenomeParse {
                position: dpos,
                message: format!("down {i} is not a number: {:?}", downs[i]),
            })?;
            let up_kernel: usize = ups[i].parse().map_err(|_| Error::GenomeParse {
                position: upos,
                message: format!("up {i} is not a number: {:?}", ups[i]),
            })?;
            let gene = FusionLevelGene {
                skip,
                down_kernel,
                up_kernel,
            };
            gene.validate().map_err(|e| Error::GenomeParse {
                position: dpos,
                message: e.to_string(),
            })?;
            levels.push(gene);
        }
        Self::new(levels)
    }
}

impl fmt::Display for FusionGenome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "skip=(")?;
        for (i, l) in self.levels.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", l.skip.letter())?;
        }
        write!(f, ") down=(")?;
        for (i, l) in self.levels.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", l.down_kernel)?;
        }
        write!(f, ") up=(")?;
        for (i, l) in self.levels.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", l.up_kernel)?;
        }
        write!(f, ")")
    }
}

/// Fusion genomes sample at a fixed level count chosen by the supernet, so
/// the trait is implemented per count via this wrapper.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FusionGenomeAt<const L: usize>(pub FusionGenome);

impl<const L: usize> fmt::Display for FusionGenomeAt<L> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl<const L: usize> Genome for FusionGenomeAt<L> {
    fn sample<R: Rng>(rng: &mut R) -> Self {
        let levels = (0..L).map(|_| FusionLevelGene::sample(rng)).collect();
        FusionGenomeAt(FusionGenome { levels }.canonicalize())
    }

    fn mutate<R: Rng>(&self, rng: &mut R, p: f64) -> Self {
        let levels = self
            .0
            .levels
            .iter()
            .map(|l| {
                let mut g = *l;
                if rng.random_bool(p) {
                    g.skip = SkipChoice::ALL[rng.random_range(0..3)];
                }
                if rng.random_bool(p) {
                    g.down_kernel = FUSION_DOWN_KERNELS[rng.random_range(0..3)];
                }
                if rng.random_bool(p) {
                    g.up_kernel = FUSION_UP_KERNELS[rng.random_range(0..2)];
                }
                g
            })
            .collect();
        FusionGenomeAt(FusionGenome { levels }.canonicalize())
    }

    fn crossover<R: Rng>(a: &Self, b: &Self, rng: &mut R) -> Self {
        let levels = a
            .0
            .levels
            .iter()
            .zip(b.0.levels.iter())
            .map(|(la, lb)| if rng.random_bool(0.5) { *la } else { *lb })
            .collect();
        FusionGenomeAt(FusionGenome { levels }.canonicalize())
    }
}

/// Raw fusion search-space size before canonicalization: `(3 * 3 * 2)^L`.
pub fn fusion_space_size(n_levels: usize) -> u64 {
    18u64.pow(n_levels as u32)
}

/// Structurally distinct fusion architectures: boundary levels lose one skip
/// choice each, so `12 * 18^(L-2) * 12`.
pub fn fusion_canonical_size(n_levels: usize) -> u64 {
    12 * 18u64.pow(n_levels as u32 - 2) * 12
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::collections::HashSet;

    #[test]
    fn warp_genome_text_round_trips() {
        let text = "(0,2,1) (0) (2) (2,1) (1,3)";
        let g = WarpGenome::parse(text).unwrap();
        assert_eq!(g.to_string(), text);
        assert_eq!(g.cells()[0].n_blocks(), 3);
        assert_eq!(g.cells()[1].n_blocks(), 1);
        assert_eq!(g.cells()[4].ops(), &[WarpOp::Conv3x3, WarpOp::Sep3x3]);
    }

    #[test]
    fn warp_genome_parse_rejects_bad_input_with_positions() {
        let err = WarpGenome::parse("(0,2,1) (0) (2) (2,1)").unwrap_err();
        assert!(err.to_string().contains("5 cells"), "{err}");

        let err = WarpGenome::parse("(0,4,1) (0) (2) (2,1) (1,3)").unwrap_err();
        assert!(err.to_string().contains("op code 4"), "{err}");

        let err = WarpGenome::parse("(0,1,2,3) (0) (2) (2,1) (1,3)").unwrap_err();
        assert!(err.to_string().contains("1..=3"), "{err}");

        let err = WarpGenome::parse("(0,2,1 (0) (2) (2,1) (1,3)").unwrap_err();
        match err {
            Error::GenomeParse { .. } => {}
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn space_sizes_match_closed_forms() {
        // Independently enumerate one cell: op vectors of length 1..=3.
        let mut count = 0u64;
        for len in 1..=3u32 {
            count += 4u64.pow(len);
        }
        assert_eq!(count, 84);
        assert_eq!(warp_cell_configs(), 84);
        assert_eq!(warp_space_size(), 84u64.pow(5));
        assert_eq!(warp_space_size(), 4_182_119_424);

        assert_eq!(fusion_space_size(5), 1_889_568);
        assert_eq!(fusion_space_size(4), 104_976);
        assert_eq!(fusion_canonical_size(5), 839_808);
        assert_eq!(fusion_canonical_size(4), 46_656);
    }

    #[test]
    fn fusion_canonical_size_matches_brute_force_enumeration() {
        // Enumerate all raw 4-level genomes, canonicalize, count distinct.
        let mut distinct = HashSet::new();
        let mut raw = 0u64;
        for code in 0..18u32.pow(4) {
            let mut c = code;
            let mut levels = Vec::new();
            for _ in 0..4 {
                let g = c % 18;
                c /= 18;
                levels.push(FusionLevelGene {
                    skip: SkipChoice::ALL[(g % 3) as usize],
                    down_kernel: FUSION_DOWN_KERNELS[((g / 3) % 3) as usize],
                    up_kernel: FUSION_UP_KERNELS[((g / 9) % 2) as usize],
                });
            }
            raw += 1;
            distinct.insert(FusionGenome::new(levels).unwrap().canonicalize());
        }
        assert_eq!(raw, fusion_space_size(4));
        assert_eq!(distinct.len() as u64, fusion_canonical_size(4));
    }

    #[test]
    fn fusion_genome_text_round_trips_and_validates() {
        let text = "skip=(s,p,n,s) down=(3,4,5,3) up=(3,5,3,5)";
        let g = FusionGenome::parse(text).unwrap();
        assert_eq!(g.to_string(), text);
        assert_eq!(g.n_levels(), 4);

        assert!(FusionGenome::parse("skip=(s,p) down=(3,4) up=(3,5)").is_err(), "2 levels");
        let err = FusionGenome::parse("skip=(s,p,n,s) down=(2,4,5,3) up=(3,5,3,5)").unwrap_err();
        assert!(err.to_string().contains("down kernel 2"), "{err}");
        let err = FusionGenome::parse("skip=(s,p,n,s) down=(3,4,5,3) up=(4,5,3,5)").unwrap_err();
        assert!(err.to_string().contains("up kernel 4"), "{err}");
        let err = FusionGenome::parse("skip=(s,p,x,s) down=(3,4,5,3) up=(3,5,3,5)").unwrap_err();
        assert!(err.to_string().contains("s/p/n"), "{err}");
    }

    #[test]
    fn canonicalization_rewrites_only_boundary_levels() {
        let g = FusionGenome::parse("skip=(n,n,p,p) down=(3,3,3,3) up=(3,3,3,3)").unwrap();
        let c = g.canonicalize();
        assert_eq!(c.to_string(), "skip=(s,n,p,s) down=(3,3,3,3) up=(3,3,3,3)");
        assert!(c.is_canonical());
    }

    #[test]
    fn sampled_genomes_are_valid_and_mutation_preserves_validity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let g = WarpGenome::sample(&mut rng);
            assert_eq!(g.cells().len(), WARP_CELLS);
            for c in g.cells() {
                assert!((1..=3).contains(&c.n_blocks()));
            }
            let m = g.mutate(&mut rng, 0.3);
            assert_eq!(m.cells().len(), WARP_CELLS);
            let x = WarpGenome::crossover(&g, &m, &mut rng);
            assert_eq!(x.cells().len(), WARP_CELLS);

            let fg = FusionGenomeAt::<4>::sample(&mut rng);
            assert!(fg.0.is_canonical(), "sampling must canonicalize");
            let fm = fg.mutate(&mut rng, 0.3);
            assert!(fm.0.is_canonical(), "mutation must canonicalize");
        }
    }

    #[test]
    fn zero_probability_mutation_is_identity_and_self_crossover_is_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let g = WarpGenome::sample(&mut rng);
            assert_eq!(g.mutate(&mut rng, 0.0), g);
            assert_eq!(WarpGenome::crossover(&g, &g, &mut rng), g);
            let fg = FusionGenomeAt::<5>::sample(&mut rng);
            assert_eq!(fg.mutate(&mut rng, 0.0), fg);
            assert_eq!(FusionGenomeAt::crossover(&fg, &fg, &mut rng), fg);
        }
    }

    #[test]
    fn sampling_draws_block_counts_and_ops_uniformly() {
        // The sampler is hierarchical: block count uniform over {1,2,3},
        // then each op uniform over the 4 codes.  Chi-square at p > 0.01:
        // the 99th percentile of chi2(2) is 9.21, of chi2(3) is 11.34.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let draws = 10_000u64;
        let mut block_counts = [0u64; 3];
        let mut op_counts = [0u64; 4];
        let mut ops_total = 0u64;
        for _ in 0..draws {
            let c = CellGenome::sample(&mut rng);
            block_counts[c.n_blocks() - 1] += 1;
            for op in c.ops() {
                op_counts[op.code() as usize] += 1;
                ops_total += 1;
            }
        }
        let expected = draws as f64 / 3.0;
        let chi2_blocks: f64 = block_counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(
            chi2_blocks < 9.21,
            "block counts not uniform: {block_counts:?}, chi2 {chi2_blocks}"
        );
        let expected = ops_total as f64 / 4.0;
        let chi2_ops: f64 = op_counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(
            chi2_ops < 11.34,
            "op codes not uniform: {op_counts:?}, chi2 {chi2_ops}"
        );
    }

    #[test]
    fn crossover_takes_each_cell_from_one_parent() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let a = WarpGenome::parse("(0) (0) (0) (0) (0)").unwrap();
        let b = WarpGenome::parse("(1,1) (1,1) (1,1) (1,1) (1,1)").unwrap();
        for _ in 0..50 {
            let child = WarpGenome::crossover(&a, &b, &mut rng);
            for cell in child.cells() {
                assert!(
                    cell == &a.cells()[0] || cell == &b.cells()[0],
                    "cells must come whole from a parent"
                );
            }
        }
    }
}
