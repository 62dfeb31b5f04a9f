#![no_main]

use amc_core::learners::Model;
use amc_tensor::checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((params, meta)) = checkpoint::decode(data) {
        assert_eq!(checkpoint::decode(&checkpoint::encode(&params, &meta)).unwrap().0, params);
    }
    let _ = Model::from_bytes(data);
});
