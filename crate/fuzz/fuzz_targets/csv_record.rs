#![no_main]

use centralflows::harness::{read_csv, write_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(records) = read_csv(data) else { return };
    let mut buf = Vec::new();
    write_csv(&mut buf, &records).expect("accepted records serialize");
    let again = read_csv(buf.as_slice()).expect("own output parses");
    // NaN cells compare unequal, so compare rendered rows instead
    let rows =
        |rs: &[centralflows::harness::TrajectoryRecord]| rs.iter().map(|r| r.to_row().unwrap()).collect::<Vec<_>>();
    assert_eq!(rows(&records), rows(&again));
});
