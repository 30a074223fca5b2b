//! Parametric system configuration, validation and the address-to-home mapping.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Maximum number of mesh tiles; node ids must fit the 6-bit header fields.
pub const MAX_TILES: u32 = 62;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("block size {0} B is not one of 16, 32, 64")]
    BlockSizeInvalid(u32),
    #[error("NoC width {0} bits is outside [64, 704] or not a multiple of 8")]
    NocWidthOutOfRange(u32),
    #[error("{cache}: size {size} B is not a multiple of assoc {assoc} x block {block} B")]
    GeometryMismatch {
        cache: &'static str,
        size: u64,
        assoc: u32,
        block: u32,
    },
    #[error("invalid topology: {0}")]
    TopologyInvalid(String),
    #[error("vlen_bits {0} must be a positive multiple of 64")]
    VlenInvalid(u32),
    #[error("{0} MSHR count must be positive")]
    MshrCountInvalid(&'static str),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum SramMode {
    Serial,
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum VsetvlMode {
    Renaming,
    Stall,
}

impl std::str::FromStr for SramMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "serial" => Ok(SramMode::Serial),
            "parallel" => Ok(SramMode::Parallel),
            _ => Err(format!("unknown sram mode '{s}'")),
        }
    }
}

impl std::str::FromStr for VsetvlMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "renaming" => Ok(VsetvlMode::Renaming),
            "stall" => Ok(VsetvlMode::Stall),
            _ => Err(format!("unknown vsetvl mode '{s}'")),
        }
    }
}

/// Mesh coordinate (row, column) of a tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(deny_unknown_fields)]
pub struct MeshCoord {
    pub row: u32,
    pub col: u32,
}

/// Fixed component latencies in cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(deny_unknown_fields, default)]
pub struct Latencies {
    pub l1_hit: u64,
    pub l15_hit: u64,
    pub l2_tag: u64,
    pub l2_data: u64,
    pub router_hop: u64,
    pub link: u64,
    pub memory: u64,
}

impl Default for Latencies {
    fn default() -> Self {
        Latencies {
            l1_hit: 1,
            l15_hit: 3,
            l2_tag: 3,
            l2_data: 5,
            router_hop: 1,
            link: 1,
            memory: 100,
        }
    }
}

/// Full parametric system description. The default instance is the
/// four-tile evaluation prototype.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub mesh_rows: u32,
    pub mesh_cols: u32,
    /// Boundary tile whose free edge port hosts the chipset (memory controller).
    pub chipset_attach: MeshCoord,
    pub l1i_size_bytes: u64,
    pub l1d_size_bytes: u64,
    pub l15_size_bytes: u64,
    pub l2_total_size_bytes: u64,
    pub l1i_assoc: u32,
    pub l1d_assoc: u32,
    pub l15_assoc: u32,
    pub l2_assoc: u32,
    pub block_size_bytes: u32,
    pub l1d_mshrs: u32,
    pub l15_mshrs: u32,
    pub l2_mshrs: u32,
    pub noc_width_bits: u32,
    pub l2_sram_mode: SramMode,
    pub vlen_bits: u32,
    pub vsetvl_mode: VsetvlMode,
    pub latencies: Latencies,
    pub rng_seed: u64,
    pub memory_size_bytes: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            mesh_rows: 2,
            mesh_cols: 2,
            chipset_attach: MeshCoord { row: 0, col: 0 },
            l1i_size_bytes: 16 * 1024,
            l1d_size_bytes: 16 * 1024,
            l15_size_bytes: 32 * 1024,
            l2_total_size_bytes: 64 * 1024,
            l1i_assoc: 4,
            l1d_assoc: 4,
            l15_assoc: 4,
            l2_assoc: 4,
            block_size_bytes: 64,
            l1d_mshrs: 64,
            l15_mshrs: 64,
            l2_mshrs: 64,
            noc_width_bits: 64,
            l2_sram_mode: SramMode::Serial,
            vlen_bits: 128,
            vsetvl_mode: VsetvlMode::Renaming,
            latencies: Latencies::default(),
            rng_seed: 0,
            memory_size_bytes: 16 << 30,
        }
    }
}

/// Side of the mesh the chipset hangs off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
pub enum Edge {
    North,
    South,
    East,
    West,
}

/// Sets/ways of one cache instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
pub struct CacheGeometry {
    pub sets: usize,
    pub ways: usize,
    pub block_size: usize,
}

/// Quantities derived once from a [`SimConfig`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Hash)]
pub struct DerivedGeometry {
    pub num_tiles: u32,
    pub chipset_node: u32,
    pub chipset_edge: Edge,
    pub l1i: CacheGeometry,
    pub l1d: CacheGeometry,
    pub l15: CacheGeometry,
    pub l2_slice: CacheGeometry,
    pub l2_slice_bytes: u64,
    /// VLMAX for SEW = 8, 16, 32, 64.
    pub vlmax_by_sew: [u32; 4],
}

/// A configuration that passed [`validate`]; immutable from here on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Hash)]
pub struct ValidatedConfig {
    cfg: SimConfig,
    geom: DerivedGeometry,
}

impl ValidatedConfig {
    pub fn source(&self) -> &SimConfig {
        &self.cfg
    }
    pub fn geometry(&self) -> &DerivedGeometry {
        &self.geom
    }
    pub fn num_tiles(&self) -> u32 {
        self.geom.num_tiles
    }
    pub fn block_size(&self) -> usize {
        self.cfg.block_size_bytes as usize
    }
    pub fn latencies(&self) -> &Latencies {
        &self.cfg.latencies
    }

    /// L2 access latency under the configured SRAM mode.
    pub fn l2_latency(&self) -> u64 {
        let l = &self.cfg.latencies;
        match self.cfg.l2_sram_mode {
            SramMode::Serial => l.l2_tag + l.l2_data,
            SramMode::Parallel => l.l2_tag.max(l.l2_data),
        }
    }

    /// L1.5 hit latency. `l15_hit` is the serial tag-then-data figure; in
    /// parallel mode the single-cycle tag lookup overlaps the data read.
    pub fn l15_latency(&self) -> u64 {
        let hit = self.cfg.latencies.l15_hit;
        match self.cfg.l2_sram_mode {
            SramMode::Serial => hit,
            SramMode::Parallel => hit.saturating_sub(1).max(1),
        }
    }

    pub fn block_addr(&self, addr: u64) -> u64 {
        addr & !(self.cfg.block_size_bytes as u64 - 1)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.cfg).expect("config serializes")
    }
}

/// `floor(addr / block) mod tiles`: block-granularity low-order interleaving.
pub fn home_tile(addr: u64, cfg: &ValidatedConfig) -> u32 {
    home_of(addr, cfg.block_size() as u64, cfg.num_tiles())
}

pub(crate) fn home_of(addr: u64, block_size: u64, tiles: u32) -> u32 {
    ((addr / block_size) % tiles as u64) as u32
}

fn geometry(
    cache: &'static str,
    size: u64,
    assoc: u32,
    block: u32,
) -> Result<CacheGeometry, ConfigError> {
    let way_bytes = assoc as u64 * block as u64;
    if assoc == 0 || size == 0 || size % way_bytes != 0 {
        return Err(ConfigError::GeometryMismatch {
            cache,
            size,
            assoc,
            block,
        });
    }
    Ok(CacheGeometry {
        sets: (size / way_bytes) as usize,
        ways: assoc as usize,
        block_size: block as usize,
    })
}

/// Check every legal-range rule and precompute derived geometry.
pub fn validate(cfg: &SimConfig) -> Result<ValidatedConfig, ConfigError> {
    if ![16, 32, 64].contains(&cfg.block_size_bytes) {
        return Err(ConfigError::BlockSizeInvalid(cfg.block_size_bytes));
    }
    if !(64..=704).contains(&cfg.noc_width_bits) || cfg.noc_width_bits % 8 != 0 {
        return Err(ConfigError::NocWidthOutOfRange(cfg.noc_width_bits));
    }
    let tiles = cfg.mesh_rows as u64 * cfg.mesh_cols as u64;
    if tiles == 0 {
        return Err(ConfigError::TopologyInvalid("mesh has zero tiles".into()));
    }
    if tiles > MAX_TILES as u64 {
        return Err(ConfigError::TopologyInvalid(format!(
            "{tiles} tiles exceeds the maximum of {MAX_TILES}"
        )));
    }
    let tiles = tiles as u32;
    let at = cfg.chipset_attach;
    if at.row >= cfg.mesh_rows || at.col >= cfg.mesh_cols {
        return Err(ConfigError::TopologyInvalid(format!(
            "chipset attach ({}, {}) is off the mesh",
            at.row, at.col
        )));
    }
    let edge = if at.col == 0 {
        Edge::West
    } else if at.col == cfg.mesh_cols - 1 {
        Edge::East
    } else if at.row == 0 {
        Edge::North
    } else if at.row == cfg.mesh_rows - 1 {
        Edge::South
    } else {
        return Err(ConfigError::TopologyInvalid(format!(
            "chipset attach ({}, {}) is not on a mesh edge",
            at.row, at.col
        )));
    };
    if cfg.vlen_bits == 0 || cfg.vlen_bits % 64 != 0 {
        return Err(ConfigError::VlenInvalid(cfg.vlen_bits));
    }
    for (name, n) in [
        ("l1d", cfg.l1d_mshrs),
        ("l15", cfg.l15_mshrs),
        ("l2", cfg.l2_mshrs),
    ] {
        if n == 0 {
            return Err(ConfigError::MshrCountInvalid(name));
        }
    }
    let b = cfg.block_size_bytes;
    let l1i = geometry("l1i", cfg.l1i_size_bytes, cfg.l1i_assoc, b)?;
    let l1d = geometry("l1d", cfg.l1d_size_bytes, cfg.l1d_assoc, b)?;
    let l15 = geometry("l15", cfg.l15_size_bytes, cfg.l15_assoc, b)?;
    if cfg.l2_total_size_bytes % tiles as u64 != 0 {
        return Err(ConfigError::GeometryMismatch {
            cache: "l2",
            size: cfg.l2_total_size_bytes,
            assoc: cfg.l2_assoc,
            block: b,
        });
    }
    let slice = cfg.l2_total_size_bytes / tiles as u64;
    let l2_slice = geometry("l2", slice, cfg.l2_assoc, b)?;
    if cfg.memory_size_bytes < b as u64 {
        return Err(ConfigError::TopologyInvalid(
            "memory smaller than one block".into(),
        ));
    }
    let v = cfg.vlen_bits;
    Ok(ValidatedConfig {
        cfg: cfg.clone(),
        geom: DerivedGeometry {
            num_tiles: tiles,
            chipset_node: tiles,
            chipset_edge: edge,
            l1i,
            l1d,
            l15,
            l2_slice,
            l2_slice_bytes: slice,
            vlmax_by_sew: [v / 8, v / 16, v / 32, v / 64],
        },
    })
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<SimConfig, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<SimConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Set a top-level or latency field by name from its textual value.
    /// Used by the CLI overrides and by sweeps.
    pub fn set_field(&mut self, name: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
            let v = v.trim();
            let parsed = if let Some(hex) = v.strip_prefix("0x") {
                u64::from_str_radix(hex, 16)
                    .map_err(|e| e.to_string())?
                    .to_string()
            } else {
                v.to_string()
            };
            parsed
                .parse::<T>()
                .map_err(|_| format!("invalid numeric value '{v}'"))
        }
        match name {
            "mesh_rows" => self.mesh_rows = num(value)?,
            "mesh_cols" => self.mesh_cols = num(value)?,
            "chipset_attach" => {
                let (r, c) = value
                    .split_once(',')
                    .ok_or_else(|| format!("chipset_attach expects 'row,col', got '{value}'"))?;
                self.chipset_attach = MeshCoord {
                    row: num(r)?,
                    col: num(c)?,
                };
            }
            "l1i_size_bytes" => self.l1i_size_bytes = num(value)?,
            "l1d_size_bytes" => self.l1d_size_bytes = num(value)?,
            "l15_size_bytes" => self.l15_size_bytes = num(value)?,
            "l2_total_size_bytes" => self.l2_total_size_bytes = num(value)?,
            "l1i_assoc" => self.l1i_assoc = num(value)?,
            "l1d_assoc" => self.l1d_assoc = num(value)?,
            "l15_assoc" => self.l15_assoc = num(value)?,
            "l2_assoc" => self.l2_assoc = num(value)?,
            "block_size_bytes" => self.block_size_bytes = num(value)?,
            "l1d_mshrs" => self.l1d_mshrs = num(value)?,
            "l15_mshrs" => self.l15_mshrs = num(value)?,
            "l2_mshrs" => self.l2_mshrs = num(value)?,
            "mshrs" => {
                let n = num(value)?;
                self.l1d_mshrs = n;
                self.l15_mshrs = n;
                self.l2_mshrs = n;
            }
            "noc_width_bits" => self.noc_width_bits = num(value)?,
            "l2_sram_mode" => self.l2_sram_mode = value.parse()?,
            "vlen_bits" => self.vlen_bits = num(value)?,
            "vsetvl_mode" => self.vsetvl_mode = value.parse()?,
            "rng_seed" => self.rng_seed = num(value)?,
            "memory_size_bytes" => self.memory_size_bytes = num(value)?,
            "l1_hit" => self.latencies.l1_hit = num(value)?,
            "l15_hit" => self.latencies.l15_hit = num(value)?,
            "l2_tag" => self.latencies.l2_tag = num(value)?,
            "l2_data" => self.latencies.l2_data = num(value)?,
            "router_hop" => self.latencies.router_hop = num(value)?,
            "link" => self.latencies.link = num(value)?,
            "memory" => self.latencies.memory = num(value)?,
            _ => return Err(format!("unknown config field '{name}'")),
        }
        Ok(())
    }

    /// Names accepted by [`SimConfig::set_field`].
    pub const FIELDS: &'static [&'static str] = &[
        "mesh_rows",
        "mesh_cols",
        "chipset_attach",
        "l1i_size_bytes",
        "l1d_size_bytes",
        "l15_size_bytes",
        "l2_total_size_bytes",
        "l1i_assoc",
        "l1d_assoc",
        "l15_assoc",
        "l2_assoc",
        "block_size_bytes",
        "l1d_mshrs",
        "l15_mshrs",
        "l2_mshrs",
        "mshrs",
        "noc_width_bits",
        "l2_sram_mode",
        "vlen_bits",
        "vsetvl_mode",
        "rng_seed",
        "memory_size_bytes",
        "l1_hit",
        "l15_hit",
        "l2_tag",
        "l2_data",
        "router_hop",
        "link",
        "memory",
    ];
}
