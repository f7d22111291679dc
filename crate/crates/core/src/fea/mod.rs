//! Displacement-driven equibiaxial extension of a two-phase Neo-Hookean
//! square under plane strain.

pub mod material;
pub mod mesh;

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMat};
use faer::{MatMut, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pattern::{write_atomic, Pattern, PatternMeta, PatternSource, CELLS, SIDE};
pub use material::{energy_density, lame_from_e_nu, MaterialParams};
pub use mesh::{Face, HeteroMesh};

/// Simulation settings for one fidelity tier, including the two materials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FidelityProfile {
    pub name: String,
    pub elements_per_side: usize,
    pub element_order: usize,
    /// Applied displacements, starting at 0.
    pub displacement_program: Vec<f64>,
    /// Newton stops when the free-dof residual norm is below this fraction
    /// of the reaction (constrained-dof) residual norm.
    pub newton_tol: f64,
    pub max_newton_iters: usize,
    /// Equal load increments between consecutive program entries.
    pub load_substeps: usize,
    pub e_soft: f64,
    pub e_stiff: f64,
    pub nu: f64,
}

impl Default for FidelityProfile {
    fn default() -> Self {
        Self::low()
    }
}

/// Maximum number of times a failed load increment is halved.
pub const MAX_BISECTIONS: usize = 4;

impl FidelityProfile {
    /// Coarse mesh, perturbation displacement only.
    pub fn low() -> Self {
        Self {
            name: "low".into(),
            elements_per_side: 64,
            element_order: 1,
            displacement_program: vec![0.0, 0.001],
            newton_tol: 1e-9,
            max_newton_iters: 25,
            load_substeps: 1,
            e_soft: 1.0,
            e_stiff: 10.0,
            nu: 0.3,
        }
    }

    /// Refined mesh and the full extension program up to 50%.
    pub fn high() -> Self {
        Self {
            name: "high".into(),
            elements_per_side: 128,
            displacement_program: vec![0.0, 0.001, 0.1, 0.2, 0.3, 0.4, 0.5],
            ..Self::low()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "low" => Ok(Self::low()),
            "high" => Ok(Self::high()),
            other => Err(Error::config("fidelity", format!("unknown profile `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.elements_per_side == 0 || self.elements_per_side % SIDE != 0 {
            return Err(Error::config(
                "elements_per_side",
                format!("{} is not a positive multiple of {SIDE}", self.elements_per_side),
            ));
        }
        if self.element_order != 1 && self.element_order != 2 {
            return Err(Error::config("element_order", "must be 1 or 2"));
        }
        let prog = &self.displacement_program;
        if prog.len() < 2 || prog[0] != 0.0 {
            return Err(Error::config(
                "displacement_program",
                "needs a leading 0 followed by at least one displacement",
            ));
        }
        if prog.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("displacement_program", "must be strictly increasing"));
        }
        if !(self.newton_tol > 0.0) {
            return Err(Error::config("newton_tol", "must be positive"));
        }
        if self.max_newton_iters == 0 {
            return Err(Error::config("max_newton_iters", "must be positive"));
        }
        if self.load_substeps == 0 {
            return Err(Error::config("load_substeps", "must be positive"));
        }
        if !(self.e_soft > 0.0) || !(self.e_stiff > 0.0) {
            return Err(Error::config("e_soft/e_stiff", "moduli must be positive"));
        }
        lame_from_e_nu(1.0, self.nu)?;
        Ok(())
    }

    pub fn final_displacement(&self) -> f64 {
        *self.displacement_program.last().unwrap_or(&0.0)
    }

    /// Stable content hash, used for caching.
    pub fn hash(&self) -> String {
        crate::sha256_hex(serde_json::to_string(self).expect("profile serializes").as_bytes())
    }
}

/// Outputs of one simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub pattern_id: String,
    pub fidelity: String,
    /// `(d, ΔΨ)` per program entry.
    pub delta_psi: Vec<(f64, f64)>,
    pub reaction_fx: Vec<f64>,
    pub reaction_fy: Vec<f64>,
    /// `(u_x, u_y)` at the 64×64 pattern-cell centres at the final `d`,
    /// row-major with pattern row 0 at the top, components interleaved.
    #[serde(skip)]
    pub displacement_field: Vec<f64>,
    pub wall_time_s: f64,
}

impl SimRecord {
    /// ΔΨ at the last program entry, used as the surrogate's label.
    pub fn label(&self) -> f64 {
        self.delta_psi.last().map_or(0.0, |p| p.1)
    }

    /// One CSV row per displacement: `pattern_id, fidelity, d, delta_psi, fx, fy`.
    pub fn write_csv_rows<W: Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        for (k, &(d, psi)) in self.delta_psi.iter().enumerate() {
            w.write_record([
                self.pattern_id.clone(),
                self.fidelity.clone(),
                d.to_string(),
                psi.to_string(),
                self.reaction_fx[k].to_string(),
                self.reaction_fy[k].to_string(),
            ])?;
        }
        Ok(())
    }
}

pub const SIM_CSV_HEADER: [&str; 6] = ["pattern_id", "fidelity", "d", "delta_psi", "fx", "fy"];

pub fn write_sim_csv(path: &Path, records: &[SimRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SIM_CSV_HEADER)?;
    for r in records {
        r.write_csv_rows(&mut w)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

pub const DISP_MAGIC: &[u8; 8] = b"HMDISP01";

/// Writes a 64×64×2 field as the magic header followed by little-endian f64.
pub fn write_displacement(path: &Path, field: &[f64]) -> Result<()> {
    if field.len() != 2 * CELLS {
        return Err(Error::Argument(format!(
            "displacement field has {} values, expected {}",
            field.len(),
            2 * CELLS
        )));
    }
    let mut bytes = Vec::with_capacity(8 + 16 * CELLS);
    bytes.extend_from_slice(DISP_MAGIC);
    for v in field {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

pub fn read_displacement(path: &Path) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Format {
        kind: "displacement",
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if bytes.len() < 8 || &bytes[..8] != DISP_MAGIC {
        return Err(bad("missing HMDISP01 header"));
    }
    if bytes.len() != 8 + 16 * CELLS {
        return Err(bad("wrong payload length"));
    }
    Ok(bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn build_mesh(pattern: &Pattern, profile: &FidelityProfile) -> Result<HeteroMesh> {
    profile.validate()?;
    let soft = MaterialParams::new(profile.e_soft, profile.nu)?;
    let stiff = MaterialParams::new(profile.e_stiff, profile.nu)?;
    HeteroMesh::from_pattern(
        pattern,
        profile.elements_per_side,
        profile.element_order,
        (soft.lame_lambda, soft.lame_mu),
        (stiff.lame_lambda, stiff.lame_mu),
    )
}

/// Free-free block of the tangent with a fixed sparsity pattern.
struct FreeSystem {
    /// Free index of each dof, `usize::MAX` when prescribed.
    free_of: Vec<usize>,
    n_free: usize,
    symbolic: SymbolicSparseColMat<usize>,
    /// Per element, `(2·nn)²` positions in `values` (lower triangle only, else `usize::MAX`).
    slots: Vec<usize>,
    llt_symbolic: SymbolicLlt<usize>,
    values: Vec<f64>,
}

impl FreeSystem {
    fn new(mesh: &HeteroMesh) -> Result<Self> {
        let mut free_of = vec![usize::MAX; mesh.n_dofs()];
        let mut n_free = 0;
        for node in 0..mesh.n_nodes() {
            if !mesh.is_boundary(node) {
                free_of[2 * node] = n_free;
                free_of[2 * node + 1] = n_free + 1;
                n_free += 2;
            }
        }
        if n_free == 0 {
            return Err(Error::config("elements_per_side", "mesh has no interior nodes"));
        }
        let nd = 2 * mesh.nodes_per_element();
        let local_free = |e: usize| -> Vec<usize> {
            let nodes = mesh.element_nodes(e);
            (0..nd).map(|a| free_of[2 * nodes[a / 2] + a % 2]).collect()
        };
        // lower-triangle entries per column
        let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n_free];
        for e in 0..mesh.n_elements() {
            let f = local_free(e);
            for &r in &f {
                for &c in &f {
                    if r != usize::MAX && c != usize::MAX && r >= c {
                        cols[c].push(r);
                    }
                }
            }
        }
        let mut col_ptr = Vec::with_capacity(n_free + 1);
        let mut row_idx = Vec::new();
        col_ptr.push(0);
        for col in cols.iter_mut() {
            col.sort_unstable();
            col.dedup();
            row_idx.extend_from_slice(col);
            col_ptr.push(row_idx.len());
        }
        let mut slots = Vec::with_capacity(mesh.n_elements() * nd * nd);
        for e in 0..mesh.n_elements() {
            let f = local_free(e);
            for &r in &f {
                for &c in &f {
                    if r != usize::MAX && c != usize::MAX && r >= c {
                        let range = col_ptr[c]..col_ptr[c + 1];
                        let pos = row_idx[range.clone()]
                            .binary_search(&r)
                            .expect("entry is in the pattern");
                        slots.push(range.start + pos);
                    } else {
                        slots.push(usize::MAX);
                    }
                }
            }
        }
        let nnz = row_idx.len();
        let symbolic = SymbolicSparseColMat::new_checked(n_free, n_free, col_ptr, None, row_idx);
        let llt_symbolic = SymbolicLlt::try_new(symbolic.as_ref(), Side::Lower)
            .map_err(|e| Error::Factorization(format!("{e:?}")))?;
        Ok(Self {
            free_of,
            n_free,
            symbolic,
            slots,
            llt_symbolic,
            values: vec![0.0; nnz],
        })
    }
}

/// Nonlinear equilibrium solver bound to one mesh.
pub struct EquibiaxialSolver<'a> {
    mesh: &'a HeteroMesh,
    profile: FidelityProfile,
    system: FreeSystem,
    /// Reference position minus the centre, per dof.
    centred: Vec<f64>,
}

/// Outcome of one load increment.
enum Increment {
    Converged,
    Failed,
}

impl<'a> EquibiaxialSolver<'a> {
    pub fn new(mesh: &'a HeteroMesh, profile: &FidelityProfile) -> Result<Self> {
        let centred = mesh
            .coords()
            .iter()
            .flat_map(|&[x, y]| [x - 0.5, y - 0.5])
            .collect();
        Ok(Self {
            mesh,
            profile: profile.clone(),
            system: FreeSystem::new(mesh)?,
            centred,
        })
    }

    /// Runs the displacement program; returns per-entry `(d, ΔΨ, fx, fy)` and
    /// the final displacement vector.
    pub fn run(&mut self) -> Result<(Vec<[f64; 4]>, Vec<f64>)> {
        let mesh = self.mesh;
        let mut u = vec![0.0; mesh.n_dofs()];
        let psi0 = mesh.total_energy(&u)?;
        let mut rows = vec![[0.0, 0.0, 0.0, 0.0]];
        let prog = self.profile.displacement_program.clone();
        let right = mesh.face_nodes(Face::Right);
        let top = mesh.face_nodes(Face::Top);
        for w in prog.windows(2) {
            let n_sub = self.profile.load_substeps;
            for s in 0..n_sub {
                let a = w[0] + (w[1] - w[0]) * s as f64 / n_sub as f64;
                let b = if s + 1 == n_sub {
                    w[1]
                } else {
                    w[0] + (w[1] - w[0]) * (s + 1) as f64 / n_sub as f64
                };
                self.advance(&mut u, a, b, 0)?;
            }
            let r = mesh.residual(&u)?;
            let fx: f64 = right.iter().map(|&n| r[2 * n]).sum();
            let fy: f64 = top.iter().map(|&n| r[2 * n + 1]).sum();
            rows.push([w[1], mesh.total_energy(&u)? - psi0, fx, fy]);
        }
        Ok((rows, u))
    }

    fn advance(&mut self, u: &mut Vec<f64>, from: f64, to: f64, level: usize) -> Result<()> {
        let saved = u.clone();
        // affine predictor: move every node by the boundary increment
        for (ui, x) in u.iter_mut().zip(&self.centred) {
            *ui += (to - from) * x;
        }
        match self.newton(u)? {
            Increment::Converged => Ok(()),
            Increment::Failed if level < MAX_BISECTIONS => {
                log::debug!("bisecting load increment {from} -> {to}");
                *u = saved;
                let mid = 0.5 * (from + to);
                self.advance(u, from, mid, level + 1)?;
                self.advance(u, mid, to, level + 1)
            }
            Increment::Failed => {
                *u = saved;
                Err(Error::Convergence {
                    last_converged_d: from,
                    target_d: to,
                })
            }
        }
    }

    fn newton(&mut self, u: &mut [f64]) -> Result<Increment> {
        let mesh = self.mesh;
        let sys = &mut self.system;
        let nd = 2 * mesh.nodes_per_element();
        let mut r = vec![0.0; mesh.n_dofs()];
        let mut energy = match mesh.total_energy(u) {
            Ok(e) => e,
            Err(Error::Inversion { .. }) => return Ok(Increment::Failed),
            Err(e) => return Err(e),
        };
        for _ in 0..self.profile.max_newton_iters {
            r.iter_mut().for_each(|v| *v = 0.0);
            sys.values.iter_mut().for_each(|v| *v = 0.0);
            let slots = &sys.slots;
            let values = &mut sys.values;
            let assembled = mesh.assemble(u, Some(&mut r), |e, ke| {
                let s = &slots[e * nd * nd..(e + 1) * nd * nd];
                for (k, &slot) in s.iter().enumerate() {
                    if slot != usize::MAX {
                        values[slot] += ke[k];
                    }
                }
            });
            match assembled {
                Ok(()) => {}
                Err(Error::Inversion { .. }) => return Ok(Increment::Failed),
                Err(e) => return Err(e),
            }
            let mut rf = vec![0.0; sys.n_free];
            let mut rc2 = 0.0;
            for (dof, &f) in sys.free_of.iter().enumerate() {
                if f == usize::MAX {
                    rc2 += r[dof] * r[dof];
                } else {
                    rf[f] = r[dof];
                }
            }
            let rf_norm = crate::linalg::norm2(&rf);
            if rf_norm <= self.profile.newton_tol * rc2.sqrt() || rf_norm < 1e-300 {
                return Ok(Increment::Converged);
            }
            let mat = SparseColMatRef::new(sys.symbolic.as_ref(), &sys.values);
            let llt = match Llt::try_new_with_symbolic(sys.llt_symbolic.clone(), mat, Side::Lower) {
                Ok(l) => l,
                // an indefinite tangent means this increment is too large
                Err(_) => return Ok(Increment::Failed),
            };
            let mut delta: Vec<f64> = rf.iter().map(|v| -v).collect();
            llt.solve_in_place(MatMut::from_column_major_slice_mut(&mut delta, sys.n_free, 1));
            let directional: f64 = rf.iter().zip(&delta).map(|(a, b)| a * b).sum();

            // backtracking on the total energy
            let mut alpha = 1.0;
            let mut trial = u.to_vec();
            let mut accepted = false;
            for _ in 0..30 {
                for (dof, &f) in sys.free_of.iter().enumerate() {
                    if f != usize::MAX {
                        trial[dof] = u[dof] + alpha * delta[f];
                    }
                }
                if let Ok(e_trial) = mesh.total_energy(&trial) {
                    let slack = 1e-12 * energy.abs().max(1e-300);
                    if e_trial <= energy + 1e-4 * alpha * directional + slack {
                        energy = e_trial;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                return Ok(Increment::Failed);
            }
            u.copy_from_slice(&trial);
        }
        Ok(Increment::Failed)
    }
}

/// Samples the FE displacement at the 64×64 pattern-cell centres.
pub fn sample_displacement(mesh: &HeteroMesh, u: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * CELLS);
    for r in 0..SIDE {
        for c in 0..SIDE {
            let x = (c as f64 + 0.5) / SIDE as f64;
            let y = 1.0 - (r as f64 + 0.5) / SIDE as f64;
            out.extend_from_slice(&mesh.interpolate(u, x, y));
        }
    }
    out
}

pub fn solve_equibiaxial(mesh: &HeteroMesh, profile: &FidelityProfile, pattern_id: &str) -> Result<SimRecord> {
    profile.validate()?;
    let start = Instant::now();
    let mut solver = EquibiaxialSolver::new(mesh, profile)?;
    let (rows, u) = solver.run()?;
    Ok(SimRecord {
        pattern_id: pattern_id.to_string(),
        fidelity: profile.name.clone(),
        delta_psi: rows.iter().map(|r| (r[0], r[1])).collect(),
        reaction_fx: rows.iter().map(|r| r[2]).collect(),
        reaction_fy: rows.iter().map(|r| r[3]).collect(),
        displacement_field: sample_displacement(mesh, &u),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Mesh and solve in one call.
pub fn simulate_pattern(pattern: &Pattern, profile: &FidelityProfile, pattern_id: &str) -> Result<SimRecord> {
    let mesh = build_mesh(pattern, profile)?;
    solve_equibiaxial(&mesh, profile, pattern_id)
}

/// Final ΔΨ for the all-soft domain, the given pattern and the all-stiff domain.
pub fn strain_energy_bounds_check(pattern: &Pattern, profile: &FidelityProfile) -> Result<(f64, f64, f64)> {
    let meta = PatternMeta::new(PatternSource::External, 0);
    let soft = simulate_pattern(&Pattern::filled(false, meta.clone()), profile, "all-soft")?;
    let hetero = simulate_pattern(pattern, profile, "pattern")?;
    let stiff = simulate_pattern(&Pattern::filled(true, meta), profile, "all-stiff")?;
    Ok((soft.label(), hetero.label(), stiff.label()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn meta() -> PatternMeta {
        PatternMeta::new(PatternSource::External, 0)
    }

    fn random_pattern(seed: u64) -> Pattern {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cells = (0..CELLS).map(|_| rng.gen_bool(0.5) as u8).collect();
        Pattern::from_cells(cells, meta()).unwrap()
    }

    #[test]
    fn profile_validation() {
        FidelityProfile::low().validate().unwrap();
        FidelityProfile::high().validate().unwrap();
        let mut p = FidelityProfile::low();
        p.displacement_program = vec![0.0, 0.1, 0.1];
        assert!(p.validate().is_err());
        let mut p = FidelityProfile::low();
        p.elements_per_side = 100;
        assert!(p.validate().is_err());
        let mut p = FidelityProfile::low();
        p.nu = 0.5;
        assert!(matches!(p.validate(), Err(Error::Incompressible { .. })));
        assert!(FidelityProfile::by_name("medium").is_err());
        assert_ne!(FidelityProfile::low().hash(), FidelityProfile::high().hash());
    }

    #[test]
    fn zero_displacement_gives_zero() {
        let mut profile = FidelityProfile::low();
        profile.displacement_program = vec![0.0, 1e-300];
        let rec = simulate_pattern(&random_pattern(1), &profile, "p").unwrap();
        assert_eq!(rec.delta_psi[0], (0.0, 0.0));
        assert_eq!(rec.reaction_fx[0], 0.0);
    }

    #[test]
    fn homogeneous_small_strain_matches_analytic() {
        let mut profile = FidelityProfile::low();
        profile.e_stiff = 1.0;
        let rec = simulate_pattern(&Pattern::filled(true, meta()), &profile, "h").unwrap();
        let d: f64 = 0.001;
        let f = [[1.0 + d, 0.0, 0.0], [0.0, 1.0 + d, 0.0], [0.0, 0.0, 1.0]];
        let expect = energy_density(&f, &MaterialParams::new(1.0, 0.3).unwrap()).unwrap();
        assert!((rec.label() - expect).abs() < 1e-12 * expect.max(1e-30) + 1e-15);
        // symmetric loading gives equal face reactions
        assert!((rec.reaction_fx[1] - rec.reaction_fy[1]).abs() < 1e-10 * rec.reaction_fx[1]);
        assert!(rec.reaction_fx[1] > 0.0);
        // the sampled field is the affine map about the centre
        let (r, c) = (10, 50);
        let x = (c as f64 + 0.5) / 64.0;
        let y = 1.0 - (r as f64 + 0.5) / 64.0;
        let k = 2 * (r * 64 + c);
        assert!((rec.displacement_field[k] - d * (x - 0.5)).abs() < 1e-12);
        assert!((rec.displacement_field[k + 1] - d * (y - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn heterogeneous_run_is_monotone_and_bounded() {
        let p = random_pattern(7);
        let profile = FidelityProfile::low();
        let (soft, het, stiff) = strain_energy_bounds_check(&p, &profile).unwrap();
        assert!(soft <= het && het <= stiff, "{soft} {het} {stiff}");
        let ones = Pattern::filled(true, meta());
        let (_, h1, s1) = strain_energy_bounds_check(&ones, &profile).unwrap();
        assert_eq!(h1, s1);
    }

    #[test]
    fn displacement_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.bin");
        let field: Vec<f64> = (0..2 * CELLS).map(|i| i as f64 * 1e-3 - 0.5).collect();
        write_displacement(&path, &field).unwrap();
        assert_eq!(read_displacement(&path).unwrap(), field);
        std::fs::write(&path, b"HMDISP00").unwrap();
        assert!(matches!(read_displacement(&path), Err(Error::Format { .. })));
        assert!(write_displacement(&path, &field[1..]).is_err());
    }

    #[test]
    fn sim_csv_rows() {
        let rec = SimRecord {
            pattern_id: "a".into(),
            fidelity: "low".into(),
            delta_psi: vec![(0.0, 0.0), (0.001, 2.5e-6)],
            reaction_fx: vec![0.0, 1.0],
            reaction_fy: vec![0.0, 1.0],
            displacement_field: vec![],
            wall_time_s: 0.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sim.csv");
        write_sim_csv(&path, &[rec]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("pattern_id,fidelity,d,delta_psi,fx,fy"));
    }
}
