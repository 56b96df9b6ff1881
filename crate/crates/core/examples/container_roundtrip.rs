//! Writes a small tensor container with mixed dtypes and metadata, reads it
//! back, and shows that a malformed file is rejected with a classified error.
//!
//!     cargo run --example container_roundtrip

use lora_eraser::container::{read_container, write_container, DType, Tensor, TensorMap};
use nalgebra::DMatrix;

fn main() -> lora_eraser::Result<()> {
    let mut map = TensorMap::new();
    map.insert_metadata("format", "pt");
    map.insert_metadata("ss_network_dim", "4");
    map.insert("up.weight", Tensor::from_matrix(DType::F16, &DMatrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 / 8.0))?)?;
    map.insert("down.weight", Tensor::from_f32(vec![4, 3], &[0.5; 12])?)?;
    map.insert("alpha", Tensor::from_f64(DType::F64, vec![], &[4.0])?)?;

    let bytes = write_container(&map)?;
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    println!("{} bytes, header {header_len} bytes", bytes.len());
    println!("{}", String::from_utf8_lossy(&bytes[8..8 + header_len as usize]).trim_end());

    let back = read_container(&bytes)?;
    assert_eq!(back, map);
    assert_eq!(write_container(&back)?, bytes);
    for (name, tensor) in back.iter() {
        println!("{name:<12} {:<4} {:?}", tensor.dtype().as_str(), tensor.shape());
    }

    let mut broken = bytes.clone();
    broken.truncate(bytes.len() - 3);
    let err = read_container(&broken).unwrap_err();
    println!("truncated file: {} ({err})", err.kind());
    Ok(())
}
