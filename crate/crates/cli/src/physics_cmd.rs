use std::io::{self, Write};
use std::path::Path;

use physe_core::physics::{
    demonstrate_nonuniqueness, forward_thickness, hydrostatic_residual, proxy_target, HydrostaticState,
    NonuniqueGrid, PhysicalConstants, PhysicsError, ProxyInputs,
};

use crate::args::{PhysicsArgs, PhysicsCommand};
use crate::commands::output_path;
use crate::CliError;

fn physics_err(e: PhysicsError) -> CliError {
    match e {
        PhysicsError::NotAttainable { .. } => CliError::Data(e.to_string()),
        other => CliError::Usage(other.to_string()),
    }
}

fn write_pairs(out: &mut dyn Write, pairs: &[(f64, f64)]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["h_s", "f_b"])?;
    for (h_s, f_b) in pairs {
        w.write_record([h_s.to_string(), f_b.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(a: &PhysicsArgs, out_dir: Option<&Path>) -> Result<(), CliError> {
    let constants = PhysicalConstants::new(a.rho_w, a.rho_i).map_err(physics_err)?;
    match &a.command {
        PhysicsCommand::Forward { hs, fb, rhos } => {
            let h_i = forward_thickness(*hs, *fb, *rhos, &constants).map_err(physics_err)?;
            println!("{h_i}");
        }
        PhysicsCommand::Residual { hs, fb, rhos, hi } => {
            let balanced = forward_thickness(*hs, *fb, *rhos, &constants).map_err(physics_err)?;
            let h_i = hi.unwrap_or(balanced);
            let state = HydrostaticState {
                h_i,
                h_s: *hs,
                f_b: *fb,
                h_sub: h_i + hs - fb,
                rho_s: *rhos,
            };
            println!("h_i\th_sub\tresidual");
            println!("{}\t{}\t{}", state.h_i, state.h_sub, hydrostatic_residual(&state, &constants));
        }
        PhysicsCommand::Proxy { sic, albedo, rhos } => {
            let inputs = ProxyInputs {
                sic: *sic,
                albedo: *albedo,
                rho_s: *rhos,
            };
            inputs.validate().map_err(physics_err)?;
            println!("{}", proxy_target(&inputs, &constants).map_err(physics_err)?);
        }
        PhysicsCommand::Nonunique {
            target,
            rhos,
            samples,
            tolerance,
            out,
        } => {
            let grid = NonuniqueGrid {
                h_s_samples: *samples,
                f_b_samples: *samples,
                rho_s: *rhos,
                tolerance: *tolerance,
                ..NonuniqueGrid::default()
            };
            let pairs = demonstrate_nonuniqueness(*target, &constants, &grid).map_err(physics_err)?;
            match output_path(out, out_dir, "nonunique.csv")? {
                Some(path) => {
                    let mut file = std::fs::File::create(&path)
                        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
                    write_pairs(&mut file, &pairs).map_err(|e| CliError::Data(e.to_string()))?;
                    eprintln!("{} pairs written to {}", pairs.len(), path.display());
                }
                None => write_pairs(&mut io::stdout().lock(), &pairs).map_err(|e| CliError::Data(e.to_string()))?,
            }
        }
    }
    Ok(())
}
