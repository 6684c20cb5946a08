//! Parse an STL file (or a built-in two-box model) and print its structure.
//!
//! ```text
//! cargo run --example parse_stl -- path/to/model.stl
//! ```

use hitl3d::mesh::{self, TriangleMesh};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mesh = match std::env::args().nth(1) {
        Some(path) => mesh::parse_stl(&std::fs::read(path)?)?,
        None => {
            let mut facets = mesh::box_facets([0.0; 3], [1.0; 3]);
            facets.extend(mesh::box_facets([2.0, 0.0, 0.0], [3.0, 0.5, 2.0]));
            TriangleMesh::from_facets(&facets)?
        }
    };
    let stats = mesh::mesh_stats(&mesh)?;
    println!("triangles:  {}", stats.triangle_count);
    println!("components: {}", stats.component_count);
    println!("bbox:       {:?}", stats.bbox);
    println!("aspect:     {:?}", stats.aspect_ratios);

    let binary = mesh::serialize_stl(&mesh);
    let reparsed = mesh::parse_stl(&binary)?;
    println!("binary round trip byte-exact: {}", mesh::serialize_stl(&reparsed) == binary);

    let ascii = mesh::write_ascii_stl(&mesh, "example");
    let from_ascii = mesh::parse_stl(ascii.as_bytes())?;
    println!("ascii round trip triangles: {}", from_ascii.triangle_count());
    Ok(())
}
