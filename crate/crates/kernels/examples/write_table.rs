//! Regenerates `data/synthetic.table` from the built-in generator.
fn main() {
    print!("# Synthetic stellar evolution grid. Units: MSun, Myr, RSun, LSun.\n# Lifetime law: t(m) = 3 Myr + 10 Gyr * m^-2.5. Not fitted to real tracks.\n{}",
        jungle_kernels::EvolutionTable::synthetic().to_text());
}
