//! Generates one maze, solves it and writes the unsolved/solved pair as PPM.
//!
//! ```text
//! cargo run --release --example render_maze -- [size] [seed] [resolution] [out_dir]
//! ```

use std::path::PathBuf;

use tacit::maze::{generate_maze, render_maze, solve_maze};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let size: usize = args.next().map_or(Ok(21), |s| s.parse())?;
    let seed: u64 = args.next().map_or(Ok(0), |s| s.parse())?;
    let res: usize = args.next().map_or(Ok(64), |s| s.parse())?;
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/maze".into()));
    std::fs::create_dir_all(&out)?;

    let grid = generate_maze(size, seed)?;
    let path = solve_maze(&grid)?;
    render_maze(&grid, None, res)?.write_ppm(out.join("input.ppm"))?;
    render_maze(&grid, Some(&path), res)?.write_ppm(out.join("target.ppm"))?;

    for r in 0..size {
        let row: String = (0..size)
            .map(
                |c| match (grid.is_open((r, c)), path.cells.contains(&(r, c))) {
                    (_, true) => '*',
                    (true, false) => ' ',
                    (false, _) => '#',
                },
            )
            .collect();
        println!("{row}");
    }
    println!(
        "{} open cells, path of {} cells, images in {}",
        grid.open_count(),
        path.len(),
        out.display()
    );
    Ok(())
}
