//! Build a pilot-bearing 16-QAM frame, shape it, and store it as a sample
//! file pair.

use prism::waveform::{
    build_frame, read_waveforms, shape_pulse, write_waveforms, Constellation, FrameSpec, Modulation,
};

fn main() -> prism::Result<()> {
    let spec =
        FrameSpec { n_training_symbols: 256, n_payload_symbols: 1024, pilot_overhead: 0.1, ..FrameSpec::default() };
    let frame = build_frame(7, &spec, &Constellation::new(Modulation::Qam16), 1)?;
    let tx = shape_pulse(&frame.symbols[0], &spec)?;
    println!(
        "{} symbols ({} pilots), {} samples at {:.0} GSa/s, occupied bandwidth {:.1} GHz",
        spec.n_symbols(),
        frame.pilot_indices().len(),
        tx.len(),
        tx.sample_rate / 1e9,
        spec.occupied_bandwidth() / 1e9
    );

    let dir = std::env::temp_dir().join("prism-transmitter");
    std::fs::create_dir_all(&dir)?;
    let (header, data) = (dir.join("tx.json"), dir.join("tx.bin"));
    write_waveforms(std::slice::from_ref(&tx), &header, &data)?;
    let back = read_waveforms(&header, &data)?;
    assert_eq!(back[0], tx);
    println!("wrote {} and {}", header.display(), data.display());
    Ok(())
}
