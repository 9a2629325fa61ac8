//! Virtual-inertia device models.
//!
//! Two implementations are supported. A grid-following device estimates the
//! bus frequency and RoCoF with a PLL and drives a power source toward the
//! set-point `u = d̃·ω̂ + m̃·ω̂̇`. A grid-forming device is a voltage source
//! whose internal angle obeys a swing law, re-expressed as the integrator
//! `ω̇_VI = u` under static output feedback `u = α̃·ω_VI + β̃·P_VI` with
//! `α̃ = -d̃/m̃`, `β̃ = 1/m̃`.
//!
//! Sign convention: device power outputs that the feedback loop measures are
//! taken in the absorbed direction (power flowing from the grid into the
//! device), so that nonnegative `m̃`, `d̃` act as added inertia and damping.
//! Reported injections elsewhere in the crate negate this.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::LinearSystem;

/// Which virtual-inertia implementation a scenario uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViMode {
    Following,
    Forming,
}

impl std::fmt::Display for ViMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ViMode::Following => write!(f, "following"),
            ViMode::Forming => write!(f, "forming"),
        }
    }
}

/// PLL loop-filter parameters plus the power-source tracking constant.
///
/// Defaults are standard tuning; optimizing them further brings no
/// significant benefit, so they are fixed per scenario and only exposed
/// through configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PllParams {
    /// Loop-filter time constant τ in seconds (must be > 0; the τ = 0
    /// SRF-PLL limit provides no RoCoF estimate and is not supported).
    pub tau: f64,
    /// Proportional synchronization gain.
    pub k_p: f64,
    /// Integral synchronization gain.
    pub k_i: f64,
    /// Power-source tracking time constant in seconds.
    pub tau_foll: f64,
}

impl Default for PllParams {
    fn default() -> Self {
        PllParams {
            tau: 0.05,
            k_p: 20.0,
            k_i: 100.0,
            tau_foll: 0.1,
        }
    }
}

impl PllParams {
    pub fn validate(&self, path: &str) -> Result<()> {
        for (name, v) in [
            ("tau", self.tau),
            ("k_p", self.k_p),
            ("k_i", self.k_i),
            ("tau_foll", self.tau_foll),
        ] {
            if !(v > 0.0) {
                return Err(Error::schema(
                    format!("{path}.{name}"),
                    format!("{name} must be positive, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// Default effective susceptance tying a grid-forming device's internal
/// voltage node to its host bus (the LC output filter seen at fundamental
/// frequency, folded into one angle-domain coupling).
pub const DEFAULT_FORMING_COUPLING: f64 = 5.0;

fn default_coupling() -> f64 {
    DEFAULT_FORMING_COUPLING
}

/// A candidate device location with its mode-independent parameters.
/// Gains live in [`Allocation`]; the mode is chosen per scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViPlacement {
    pub bus: String,
    #[serde(default)]
    pub pll: PllParams,
    /// Effective susceptance to the grid in forming mode, per unit.
    #[serde(default = "default_coupling")]
    pub coupling: f64,
    /// Optional per-device inertia bound override, same unit as m̃.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_cap: Option<f64>,
    /// Optional per-device damping bound override, same unit as d̃.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_cap: Option<f64>,
}

/// The set of virtual-inertia devices of one scenario, in a fixed order
/// that all gain vectors, labels, and matrices follow.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSet {
    pub devices: Vec<ViPlacement>,
}

impl DeviceSet {
    pub fn empty() -> Self {
        DeviceSet::default()
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn buses(&self) -> Vec<String> {
        self.devices.iter().map(|d| d.bus.clone()).collect()
    }

    /// Parse a device-set document and check all invariants.
    pub fn from_json(text: &str) -> Result<Self> {
        let set: DeviceSet = serde_json::from_str(text)
            .map_err(|e| Error::schema("devices", e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, d) in self.devices.iter().enumerate() {
            d.pll.validate(&format!("devices[{i}].pll"))?;
            if !(d.coupling > 0.0) {
                return Err(Error::schema(
                    format!("devices[{i}].coupling"),
                    "coupling susceptance must be positive",
                ));
            }
            if self.devices[..i].iter().any(|o| o.bus == d.bus) {
                return Err(Error::schema(
                    format!("devices[{i}].bus"),
                    format!("duplicate device at bus {}", d.bus),
                ));
            }
        }
        Ok(())
    }
}

/// Grid-following device: PLL states plus a first-order power source.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFollowingVi {
    pub bus: String,
    pub pll: PllParams,
    pub m_virt: f64,
    pub d_virt: f64,
}

impl GridFollowingVi {
    pub fn validate(&self) -> Result<()> {
        self.pll.validate("pll")?;
        if self.m_virt < 0.0 || self.d_virt < 0.0 {
            return Err(Error::Invalid(format!(
                "grid-following gains must be nonnegative, got m={} d={}",
                self.m_virt, self.d_virt
            )));
        }
        Ok(())
    }
}

/// Grid-forming device: internal swing node behind an effective susceptance.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFormingVi {
    pub bus: String,
    pub coupling: f64,
    pub m_virt: f64,
    pub d_virt: f64,
}

impl GridFormingVi {
    pub fn validate(&self) -> Result<()> {
        if !(self.m_virt > 0.0) {
            return Err(Error::Invalid(
                "inertia must be positive for grid-forming".into(),
            ));
        }
        if self.d_virt < 0.0 {
            return Err(Error::Invalid("damping must be nonnegative".into()));
        }
        if !(self.coupling > 0.0) {
            return Err(Error::Invalid("coupling susceptance must be positive".into()));
        }
        Ok(())
    }
}

/// A placed device with gains, in either mode.
#[derive(Debug, Clone, PartialEq)]
pub enum ViDevice {
    Following(GridFollowingVi),
    Forming(GridFormingVi),
}

/// Local state-space block of one device.
///
/// Conventions: local state 0 is the device angle (PLL angle estimate or
/// internal voltage angle), state 1 the device frequency variable. For a
/// following device, rows couple to the scalar `v_q = x₀ − θ_bus` through
/// `vq_gain`; the assembler substitutes the bus angle. The network-coupled
/// power outputs are formed at assembly time, not here.
#[derive(Debug, Clone)]
pub struct DeviceBlock {
    /// Local-state coupling, excluding `v_q` and reference-frame terms.
    pub a_local: DMatrix<f64>,
    /// Derivative of the local states with respect to the control input.
    pub input_gain: DVector<f64>,
    /// Coefficient of `v_q` in each local state equation (zero for forming).
    pub vq_gain: DVector<f64>,
    pub labels: Vec<&'static str>,
}

impl DeviceBlock {
    pub fn n_states(&self) -> usize {
        self.a_local.nrows()
    }
}

/// Build the appended state block of a single device.
///
/// Following: states `(θ̂, ω̂, ∫v_q, P)` with PLL dynamics
/// `θ̂' = ω̂`, `τ ω̂' = -ω̂ - K_P v_q - K_I ∫v_q`, and power lag
/// `τ_foll P' = -P + u`. Forming: states `(θ_VI, ω_VI)` with
/// `θ̇_VI = ω_VI`, `ω̇_VI = u`.
pub fn device_block(device: &ViDevice) -> Result<DeviceBlock> {
    match device {
        ViDevice::Following(d) => {
            d.validate()?;
            let p = &d.pll;
            let mut a = DMatrix::zeros(4, 4);
            a[(0, 1)] = 1.0;
            a[(1, 1)] = -1.0 / p.tau;
            a[(1, 2)] = -p.k_i / p.tau;
            a[(3, 3)] = -1.0 / p.tau_foll;
            let input_gain = DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0 / p.tau_foll]);
            let vq_gain = DVector::from_vec(vec![0.0, -p.k_p / p.tau, 1.0, 0.0]);
            Ok(DeviceBlock {
                a_local: a,
                input_gain,
                vq_gain,
                labels: vec!["pll_angle", "pll_speed", "pll_integrator", "power_lag"],
            })
        }
        ViDevice::Forming(d) => {
            d.validate()?;
            let mut a = DMatrix::zeros(2, 2);
            a[(0, 1)] = 1.0;
            let input_gain = DVector::from_vec(vec![0.0, 1.0]);
            let vq_gain = DVector::zeros(2);
            Ok(DeviceBlock {
                a_local: a,
                input_gain,
                vq_gain,
                labels: vec!["vi_angle", "vi_speed"],
            })
        }
    }
}

/// Per-device virtual inertia and damping, the optimizer's decision variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationEntry {
    pub bus: String,
    pub m_virt: f64,
    pub d_virt: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Allocation {
    pub entries: Vec<AllocationEntry>,
}

impl Allocation {
    pub fn zeros(buses: &[String]) -> Self {
        Allocation {
            entries: buses
                .iter()
                .map(|b| AllocationEntry {
                    bus: b.clone(),
                    m_virt: 0.0,
                    d_virt: 0.0,
                })
                .collect(),
        }
    }

    pub fn from_gains(buses: &[String], m: &[f64], d: &[f64]) -> Self {
        assert_eq!(buses.len(), m.len());
        assert_eq!(buses.len(), d.len());
        Allocation {
            entries: buses
                .iter()
                .zip(m.iter().zip(d))
                .map(|(bus, (&m_virt, &d_virt))| AllocationEntry {
                    bus: bus.clone(),
                    m_virt,
                    d_virt,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_inertia(&self) -> f64 {
        self.entries.iter().map(|e| e.m_virt).sum()
    }

    pub fn total_damping(&self) -> f64 {
        self.entries.iter().map(|e| e.d_virt).sum()
    }

    pub fn inertia_vec(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.m_virt).collect()
    }

    pub fn damping_vec(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.d_virt).collect()
    }
}

/// One 1×2 feedback block acting on a device's two measured outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainBlock {
    pub bus: String,
    /// Following: `[d̃, m̃]` on `(ω̂, ω̂̇)`. Forming: `[α̃, β̃]` on `(ω_VI, P_VI)`.
    pub gains: [f64; 2],
}

/// Structured static output-feedback matrix. Block-diagonal by construction:
/// device `i`'s row acts only on outputs `2i` and `2i+1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainMatrix {
    pub mode: ViMode,
    pub blocks: Vec<GainBlock>,
}

impl GainMatrix {
    /// Dense `n_dev × 2·n_dev` matrix realizing the sparsity pattern.
    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.blocks.len();
        let mut k = DMatrix::zeros(n, 2 * n);
        for (i, b) in self.blocks.iter().enumerate() {
            k[(i, 2 * i)] = b.gains[0];
            k[(i, 2 * i + 1)] = b.gains[1];
        }
        k
    }
}

/// Express an allocation as the static output-feedback matrix of its mode.
pub fn gains_to_feedback(alloc: &Allocation, mode: ViMode) -> Result<GainMatrix> {
    let blocks = alloc
        .entries
        .iter()
        .map(|e| {
            if e.m_virt < 0.0 || e.d_virt < 0.0 {
                return Err(Error::Invalid(format!(
                    "gains must be nonnegative at bus {}",
                    e.bus
                )));
            }
            let gains = match mode {
                ViMode::Following => [e.d_virt, e.m_virt],
                ViMode::Forming => {
                    if !(e.m_virt > 0.0) {
                        return Err(Error::Invalid(
                            "inertia must be positive for grid-forming".into(),
                        ));
                    }
                    [-e.d_virt / e.m_virt, 1.0 / e.m_virt]
                }
            };
            Ok(GainBlock {
                bus: e.bus.clone(),
                gains,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GainMatrix { mode, blocks })
}

/// Exact inverse of [`gains_to_feedback`].
pub fn feedback_to_gains(k: &GainMatrix) -> Result<Allocation> {
    let entries = k
        .blocks
        .iter()
        .map(|b| {
            let (m_virt, d_virt) = match k.mode {
                ViMode::Following => (b.gains[1], b.gains[0]),
                ViMode::Forming => {
                    let beta = b.gains[1];
                    if !(beta > 0.0) {
                        return Err(Error::Invalid(format!(
                            "forming feedback requires positive inverse-inertia gain, got {beta}"
                        )));
                    }
                    (1.0 / beta, -b.gains[0] / beta)
                }
            };
            Ok(AllocationEntry {
                bus: b.bus.clone(),
                m_virt,
                d_virt,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Allocation { entries })
}

/// A closed loop ready for H2 evaluation or simulation:
/// `ẋ = A x + G η`, `y_p = C_p x`.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub a: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub c_perf: DMatrix<f64>,
}

/// Close the measurement loop: `A_cl = A + B K C`; the disturbance and
/// performance maps pass through unchanged.
pub fn close_loop(sys: &LinearSystem, k: &GainMatrix) -> Result<ClosedLoop> {
    if k.mode != sys.mode {
        return Err(Error::Dimension(format!(
            "gain matrix is {} but system was assembled for {}",
            k.mode, sys.mode
        )));
    }
    if k.blocks.len() != sys.device_buses.len() {
        return Err(Error::Dimension(format!(
            "{} gain blocks for {} devices",
            k.blocks.len(),
            sys.device_buses.len()
        )));
    }
    for (b, bus) in k.blocks.iter().zip(&sys.device_buses) {
        if &b.bus != bus {
            return Err(Error::Dimension(format!(
                "gain block bus {} does not match system device bus {}",
                b.bus, bus
            )));
        }
    }
    let a = if k.blocks.is_empty() {
        sys.a.clone()
    } else {
        &sys.a + &sys.b * k.dense() * &sys.c
    };
    Ok(ClosedLoop {
        a,
        g: sys.g.clone(),
        c_perf: sys.c_perf.clone(),
    })
}
