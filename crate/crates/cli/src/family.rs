//! Builtin model families addressed by tag with named parameters.

use clap::Args;

use spinfact::hamiltonian::assemble;
use spinfact::models::{self, Candidate, MgXxzParams, ModelInstance, Range, XyzLadderParams};
use spinfact::error::{Error, Result};

pub const FAMILIES: [&str; 4] = ["mg_xxz", "xyz_ladder", "xyz_tetramer", "kurmann"];

/// Unset values fall back to per-family defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct FamilyParams {
    /// Site spin.
    #[arg(long)]
    pub s: Option<f64>,
    /// Number of pairs (mg_xxz, xyz_ladder).
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Number of sites (kurmann).
    #[arg(long)]
    pub sites: Option<usize>,
    #[arg(long = "J")]
    pub j: Option<f64>,
    #[arg(long = "Jz")]
    pub jz: Option<f64>,
    #[arg(long = "JE")]
    pub je: Option<f64>,
    #[arg(long = "JEz")]
    pub jez: Option<f64>,
    #[arg(long = "JD")]
    pub jd: Option<f64>,
    #[arg(long = "JDz")]
    pub jdz: Option<f64>,
    /// Uniform field along z (mg_xxz).
    #[arg(long)]
    pub b0: Option<f64>,
    #[arg(long = "Jx")]
    pub jx: Option<f64>,
    #[arg(long = "Jy")]
    pub jy: Option<f64>,
    #[arg(long = "JEx")]
    pub jex: Option<f64>,
    #[arg(long = "JEy")]
    pub jey: Option<f64>,
    #[arg(long = "JDx")]
    pub jdx: Option<f64>,
    #[arg(long = "JDy")]
    pub jdy: Option<f64>,
}

/// Parameter names accepted by `--param`.
pub const PARAMS: [&str; 15] =
    ["s", "J", "Jz", "JE", "JEz", "JD", "JDz", "b0", "Jx", "Jy", "JEx", "JEy", "JDx", "JDy", "2JD/JE"];

impl FamilyParams {
    fn slot(&mut self, name: &str) -> Option<&mut Option<f64>> {
        Some(match name {
            "s" => &mut self.s,
            "J" => &mut self.j,
            "Jz" => &mut self.jz,
            "JE" => &mut self.je,
            "JEz" => &mut self.jez,
            "JD" => &mut self.jd,
            "JDz" => &mut self.jdz,
            "b0" => &mut self.b0,
            "Jx" => &mut self.jx,
            "Jy" => &mut self.jy,
            "JEx" => &mut self.jex,
            "JEy" => &mut self.jey,
            "JDx" => &mut self.jdx,
            "JDy" => &mut self.jdy,
            _ => return None,
        })
    }

    /// Copy with one named parameter replaced. `2JD/JE` sets `JD` from the current `JE`.
    pub fn with(&self, name: &str, value: f64) -> Result<Self> {
        let mut out = self.clone();
        if name == "2JD/JE" {
            out.jd = Some(0.5 * value * self.je.unwrap_or(1.0));
            return Ok(out);
        }
        match out.slot(name) {
            Some(slot) => *slot = Some(value),
            None => return Err(Error::InvalidArgument(format!("unknown parameter {name:?}; expected one of {PARAMS:?}"))),
        }
        Ok(out)
    }
}

pub fn build(tag: &str, p: &FamilyParams, cyclic: bool) -> Result<ModelInstance> {
    match tag {
        "mg_xxz" => {
            let (s, j, je, jd) = (p.s.unwrap_or(0.5), p.j.unwrap_or(1.0), p.je.unwrap_or(1.0), p.jd.unwrap_or(0.5));
            let mut q = MgXxzParams::dimerizing(p.pairs.unwrap_or(4), s, j, je, jd, cyclic);
            q.jz = p.jz.unwrap_or(q.jz);
            q.jez = p.jez.unwrap_or(q.jez);
            q.jdz = p.jdz.unwrap_or(q.jez / 2.0);
            q.b0 = p.b0.unwrap_or(0.0);
            models::mg_xxz_chain(&q)
        }
        "xyz_ladder" => models::xyz_ladder(&XyzLadderParams {
            n_pairs: p.pairs.unwrap_or(4),
            jx: p.jx.unwrap_or(1.0),
            jy: p.jy.unwrap_or(0.5),
            jz: p.jz.unwrap_or(0.0),
            je: [p.jex.unwrap_or(1.0), p.jey.unwrap_or(0.5)],
            jd: [p.jdx.unwrap_or(1.5), p.jdy.unwrap_or(1.5f64.sqrt())],
            range: Range::Nearest { cyclic },
            fields: None,
            require_exact: false,
        }),
        "xyz_tetramer" => {
            models::xyz_tetramer(p.jx.unwrap_or(1.0), p.jy.unwrap_or(0.5), p.jdx.unwrap_or(1.5), p.jz.unwrap_or(0.0))
                .map(|t| t.instance)
        }
        "kurmann" => {
            let s = p.s.unwrap_or(0.5);
            let c = models::kurmann_chain(
                s,
                p.sites.unwrap_or(8),
                p.jx.unwrap_or(1.0),
                p.jy.unwrap_or(0.5),
                p.jz.unwrap_or(0.25),
                cyclic,
            )?;
            let h = assemble(&c.model)?;
            let energy = h.energy(&c.state.full_vector());
            let candidate =
                Candidate { label: "coherent".into(), state: c.state, energy, pair_energies: Vec::new(), angles: Vec::new() };
            Ok(ModelInstance { model: c.model, candidates: vec![candidate], notes: Vec::new() })
        }
        other => Err(Error::UnknownFamily(format!("{other} (known: {})", FAMILIES.join(", ")))),
    }
}
