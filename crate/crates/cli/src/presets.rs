//! Configs shipped with the binary.

pub const NAMES: [&str; 6] = ["square_ground", "rect_transversal", "tangent_disk", "square_cluster", "nodal_line", "capacity"];

pub fn get(name: &str) -> Option<&'static str> {
    Some(match name {
        "square_ground" => include_str!("../../../configs/square_ground.toml"),
        "rect_transversal" => include_str!("../../../configs/rect_transversal.toml"),
        "tangent_disk" => include_str!("../../../configs/tangent_disk.toml"),
        "square_cluster" => include_str!("../../../configs/square_cluster.toml"),
        "nodal_line" => include_str!("../../../configs/nodal_line.toml"),
        "capacity" => include_str!("../../../configs/capacity.toml"),
        _ => return None,
    })
}
