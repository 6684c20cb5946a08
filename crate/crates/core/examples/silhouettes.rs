//! Render orthographic silhouettes of a mesh and draw one view as ASCII.

use hitl3d::mesh::{self, TriangleMesh};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut facets = mesh::box_facets([0.0, 0.0, 0.0], [2.0, 1.0, 0.4]);
    facets.extend(mesh::box_facets([0.8, 0.3, 0.4], [1.2, 0.7, 1.8]));
    let mesh = TriangleMesh::from_facets(&facets)?;

    let dirs = mesh::default_view_directions();
    let set = mesh::render_silhouettes(&mesh, &dirs, mesh::DEFAULT_GRID)?;
    for (v, d) in dirs.iter().enumerate() {
        println!("view {v} {d:?}: occupancy {:.3}", set.occupancy(v));
    }

    let small = set.downsample(16);
    let view = 1;
    println!("\nview {view} at 16x16:");
    for r in 0..small.grid {
        let line: String = (0..small.grid)
            .map(|c| match small.cell(view, r, c) {
                x if x >= 0.75 => '#',
                x if x >= 0.25 => '+',
                x if x > 0.0 => '.',
                _ => ' ',
            })
            .collect();
        println!("|{line}|");
    }

    let fv = mesh::mesh_features(&mesh)?;
    println!("\nmesh feature count: {}", fv.len());
    Ok(())
}
