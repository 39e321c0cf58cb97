//! TOML model files.
//!
//! ```toml
//! spins = [0.5, 0.5]
//! clusters = [[0, 1]]
//! constant = 0.0
//! fields = [[0, "z", 0.25, 0.0]]              # (site, mu, re, im)
//! couplings = [[0, 1, "x", "x", 1.0, 0.0]]    # (p, q, mu, nu, re, im)
//!
//! [[state]]                                   # one block per factor
//! sites = [0, 1]
//! factor_spins = [0.5, 0.5]
//! amplitudes = [[0.0, 0.0], [0.7071067811865476, 0.0], [-0.7071067811865476, 0.0], [0.0, 0.0]]
//! ```

use serde::{Deserialize, Serialize};

use spinfact::hamiltonian::{Coupling, ModelSpec};
use spinfact::linalg::{CVec, C64};
use spinfact::states::{Factor, LocalState, ProductState};

pub type FieldRecord = (usize, String, f64, f64);
pub type CouplingRecord = (usize, usize, String, String, f64, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub spins: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clusters: Vec<Vec<usize>>,
    #[serde(default)]
    pub constant: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub allow_non_hermitian: bool,
    #[serde(default)]
    pub fields: Vec<FieldRecord>,
    #[serde(default)]
    pub couplings: Vec<CouplingRecord>,
    #[serde(default, rename = "state", skip_serializing_if = "Vec::is_empty")]
    pub state: Vec<StateBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateBlock {
    /// Defaults to the next consecutive sites.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sites: Option<Vec<usize>>,
    pub factor_spins: Vec<f64>,
    pub amplitudes: Vec<[f64; 2]>,
}

const LABELS: [&str; 3] = ["x", "y", "z"];

fn component(label: &str) -> Result<usize, String> {
    LABELS.iter().position(|&l| l == label).ok_or_else(|| format!("unknown operator label {label:?} (expected x, y or z)"))
}

impl ModelFile {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> Result<String, String> {
        toml::to_string(self).map_err(|e| e.to_string())
    }

    pub fn model(&self) -> Result<ModelSpec, String> {
        let n = self.spins.len();
        let site = |i: usize| if i < n { Ok(i) } else { Err(format!("site {i} out of range (n = {n})")) };
        let mut m = ModelSpec::new(self.spins.clone());
        m.clusters = self.clusters.clone();
        m.constant = self.constant;
        m.allow_non_hermitian = self.allow_non_hermitian;
        m.family_tag = self.family.clone();
        for (i, mu, re, im) in &self.fields {
            m.fields[site(*i)?][component(mu)?] += C64::new(*re, *im);
        }
        for (p, q, mu, nu, re, im) in &self.couplings {
            let mut c: Coupling = [[C64::new(0.0, 0.0); 3]; 3];
            c[component(mu)?][component(nu)?] = C64::new(*re, *im);
            m.add_bond(site(*p)?, site(*q)?, c);
        }
        m.validate().map_err(|e| e.to_string())?;
        Ok(m)
    }

    pub fn product_state(&self) -> Result<Option<ProductState>, String> {
        if self.state.is_empty() {
            return Ok(None);
        }
        let mut next = 0;
        let mut factors = Vec::new();
        for b in &self.state {
            let amps = CVec::from_iterator(b.amplitudes.len(), b.amplitudes.iter().map(|a| C64::new(a[0], a[1])));
            let state = LocalState::new(b.factor_spins.clone(), amps).map_err(|e| e.to_string())?;
            let sites = b.sites.clone().unwrap_or_else(|| (next..next + b.factor_spins.len()).collect());
            next = sites.iter().max().map_or(next, |m| m + 1);
            factors.push(Factor { sites, state });
        }
        let st = ProductState::new(factors).map_err(|e| e.to_string())?;
        for f in &st.factors {
            for (k, &i) in f.sites.iter().enumerate() {
                if self.spins.get(i) != Some(&f.state.factor_spins[k]) {
                    return Err(format!("state block spin on site {i} does not match the model"));
                }
            }
        }
        Ok(Some(st))
    }

    pub fn from_model(m: &ModelSpec, state: Option<&ProductState>) -> Self {
        let mut fields = Vec::new();
        for (i, b) in m.fields.iter().enumerate() {
            for (mu, z) in b.iter().enumerate() {
                if *z != C64::new(0.0, 0.0) {
                    fields.push((i, LABELS[mu].to_string(), z.re, z.im));
                }
            }
        }
        let mut couplings = Vec::new();
        for bond in &m.bonds {
            for mu in 0..3 {
                for nu in 0..3 {
                    let z = bond.coupling[mu][nu];
                    if z != C64::new(0.0, 0.0) {
                        couplings.push((bond.i, bond.j, LABELS[mu].to_string(), LABELS[nu].to_string(), z.re, z.im));
                    }
                }
            }
        }
        let state = state
            .map(|st| {
                st.factors
                    .iter()
                    .map(|f| StateBlock {
                        sites: Some(f.sites.clone()),
                        factor_spins: f.state.factor_spins.clone(),
                        amplitudes: f.state.amplitudes.iter().map(|z| [z.re, z.im]).collect(),
                    })
                    .collect()
            })
            .unwrap_or_default();
        ModelFile {
            spins: m.spins.clone(),
            family: m.family_tag.clone(),
            clusters: m.clusters.clone(),
            constant: m.constant,
            allow_non_hermitian: m.allow_non_hermitian,
            fields,
            couplings,
            state,
        }
    }
}
