//! Encode a message into a wire frame, dump its bytes, and decode it back.

use dmlflow::runtime::{decode_frame, encode_frame, TensorMsg};
use dmlflow::tensor::DenseTensor;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(" ")
}

fn main() {
    let empty = encode_frame(&TensorMsg::data(0, 0, 0, Vec::new()));
    println!("empty DATA ({} bytes): {}", empty.len(), hex(&empty));

    let m = TensorMsg::data(
        3,
        7,
        2,
        vec![
            DenseTensor::from_f32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            DenseTensor::from_i64(vec![1], vec![-1]).unwrap(),
        ],
    );
    let frame = encode_frame(&m);
    println!("model frame ({} bytes): {}", frame.len(), hex(&frame));
    assert_eq!(decode_frame(&frame).unwrap(), m);

    let mut bad = frame.clone();
    bad[22] = 0xFF;
    println!("corrupted dtype: {}", decode_frame(&bad).unwrap_err());
}
