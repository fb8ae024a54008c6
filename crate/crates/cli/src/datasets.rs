use std::str::FromStr;

use anyhow::Result;
use plantseg::datasets::{self, DatasetId};

use crate::args::{MakeMiniArgs, VerifyArgs};
use crate::context::Ctx;
use crate::UsageError;

pub fn verify(ctx: &Ctx, args: &VerifyArgs) -> Result<()> {
    let dataset = ctx.dataset(&args.data)?;
    let report = datasets::verify(dataset.id, &dataset.root, args.checksums.as_deref())?;
    for (split, c) in &report.splits {
        println!("{:<6} {:>6} images, {:>6} with masks", split, c.images, c.with_masks);
    }
    println!("total  {:>6} images under {}", report.total, dataset.root.display());
    if report.checksums_checked > 0 {
        println!(
            "checksums: {} checked, {} failed",
            report.checksums_checked,
            report.checksum_failures.len()
        );
    }
    if !report.checksum_failures.is_empty() {
        return Err(plantseg::Error::invalid(format!(
            "checksum mismatch for {}",
            report.checksum_failures.join(", ")
        ))
        .into());
    }
    Ok(())
}

pub fn make_mini(ctx: &Ctx, args: &MakeMiniArgs) -> Result<()> {
    let id = DatasetId::from_str(&args.dataset).map_err(|e| UsageError(e.to_string()))?;
    let mut manifest = ctx.manifest("datasets make-mini", args);
    let n = datasets::write_mini_fixture(id, &args.out, ctx.seed)?;
    manifest.output(&args.out);
    manifest.write(&args.out)?;
    println!("{n} {id} look-alike images -> {}", args.out.display());
    Ok(())
}
