//! Stand-in external lossy codec: uniform scalar quantization.
//!
//! ```text
//! resc-quantize encode [--step N] <in.pnm> <out.bin>
//! resc-quantize decode <in.bin> <out.pnm>
//! ```
//!
//! Payload: `"RQ1"`, u32 width, u32 height, u8 channels, u8 step, then one
//! quantization index per sample.

use resc_core::Image;
use std::path::Path;
use std::process::ExitCode;

const MAGIC: &[u8; 3] = b"RQ1";

fn quantize(img: &Image, step: u8) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(img.width() as u32).to_le_bytes());
    out.extend_from_slice(&(img.height() as u32).to_le_bytes());
    out.push(img.channels() as u8);
    out.push(step);
    out.extend(img.data().iter().map(|&v| v / step));
    out
}

fn dequantize(payload: &[u8]) -> Result<Image, String> {
    if payload.len() < 13 || &payload[..3] != MAGIC {
        return Err("not a resc-quantize payload".into());
    }
    let w = u32::from_le_bytes(payload[3..7].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(payload[7..11].try_into().unwrap()) as usize;
    let (c, step) = (payload[11] as usize, payload[12] as u32);
    let body = &payload[13..];
    if step == 0 || body.len() != w * h * c {
        return Err("payload is inconsistent".into());
    }
    let data = body.iter().map(|&q| (q as u32 * step + step / 2).min(255) as u8).collect();
    Image::new(w, h, c, data).map_err(|e| e.to_string())
}

fn run(args: &[String]) -> Result<(), String> {
    match args {
        [cmd, rest @ ..] if cmd == "encode" => {
            let (step, files) = match rest {
                [flag, n, files @ ..] if flag == "--step" => (n.parse::<u8>().map_err(|_| format!("bad step {n:?}"))?, files),
                files => (16, files),
            };
            let [input, output] = files else {
                return Err("encode needs <in> <out>".into());
            };
            if step == 0 {
                return Err("step must be positive".into());
            }
            let img = Image::read(Path::new(input)).map_err(|e| e.to_string())?;
            std::fs::write(output, quantize(&img, step)).map_err(|e| format!("{output}: {e}"))
        }
        [cmd, input, output] if cmd == "decode" => {
            let payload = std::fs::read(input).map_err(|e| format!("{input}: {e}"))?;
            dequantize(&payload)?.write(Path::new(output)).map_err(|e| e.to_string())
        }
        _ => Err("usage: resc-quantize encode [--step N] <in> <out> | decode <in> <out>".into()),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("resc-quantize: {e}");
            ExitCode::from(1)
        }
    }
}
