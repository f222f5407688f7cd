//! Scripted providers and a synthetic bathroom scene for offline runs.

use std::sync::Arc;

use image::{Rgb, RgbImage};

use crate::clock::Clock;
use crate::digest::sha256_hex;
use crate::domain::{MaskRle, SegmentLabel};
use crate::pipeline::ScanProviders;
use crate::providers::{
    encode_png, ChatClient, FixtureSegmenter, HashEmbedder, ProviderConfig, ScriptFile, ScriptedChat, ScriptedError,
};

/// Default chat script for mock mode.
pub const SCRIPT_JSON: &str = include_str!("../../../fixtures/mock/script.json");

pub const BATHROOM_WIDTH: u32 = 160;
pub const BATHROOM_HEIGHT: u32 = 120;
pub const BATHROOM_DESCRIPTION: &str = "a small home bathroom with a bathtub, sink and mirror";

const WALL: [u8; 3] = [230, 225, 210];

/// Labelled regions in drawing order; later regions cover earlier ones.
const REGIONS: [(&str, [u8; 3], &[(u32, u32, u32, u32)]); 5] = [
    ("floor", [150, 170, 190], &[(0, 84, 160, 120)]),
    ("bathtub", [245, 245, 245], &[(4, 56, 70, 100)]),
    ("mirror", [170, 210, 230], &[(96, 8, 140, 44)]),
    ("sink", [250, 250, 250], &[(94, 56, 142, 70), (112, 70, 124, 84)]),
    ("outlet", [240, 235, 200], &[(146, 30, 154, 40)]),
];

/// Region index owning each pixel, or `None` for bare wall.
fn owner(x: u32, y: u32) -> Option<usize> {
    REGIONS
        .iter()
        .enumerate()
        .rev()
        .find(|(_, (_, _, rects))| rects.iter().any(|&(x0, y0, x1, y1)| x >= x0 && x < x1 && y >= y0 && y < y1))
        .map(|(i, _)| i)
}

pub fn bathroom_image() -> RgbImage {
    RgbImage::from_fn(BATHROOM_WIDTH, BATHROOM_HEIGHT, |x, y| {
        Rgb(owner(x, y).map_or(WALL, |i| REGIONS[i].1))
    })
}

pub fn bathroom_png() -> Vec<u8> {
    encode_png(&bathroom_image())
}

/// Labels 1..=5: floor, bathtub, mirror, sink, outlet.
pub fn bathroom_labels() -> Vec<SegmentLabel> {
    REGIONS
        .iter()
        .enumerate()
        .map(|(i, (name, _, _))| SegmentLabel {
            label_id: i as u32 + 1,
            name: (*name).into(),
            mask: MaskRle::from_fn(BATHROOM_WIDTH, BATHROOM_HEIGHT, |x, y| owner(x, y) == Some(i)),
        })
        .collect()
}

/// Knows the bathroom scene; other images fall back to color segmentation.
pub fn segmenter() -> FixtureSegmenter {
    FixtureSegmenter::new().with(sha256_hex(&bathroom_png()), bathroom_labels())
}

pub fn default_script() -> ScriptFile {
    ScriptFile::parse(SCRIPT_JSON).expect("bundled mock script is valid")
}

pub fn chat_client(script: ScriptFile, clock: Arc<dyn Clock>) -> ChatClient {
    ChatClient::new(Arc::new(ScriptedChat::from_rules(script)), ProviderConfig::scripted()).with_clock(clock)
}

/// Scripted chat, hash embeddings and the fixture segmenter.
pub fn providers(script: ScriptFile, clock: Arc<dyn Clock>) -> ScanProviders {
    ScanProviders {
        chat: Arc::new(chat_client(script, clock)),
        embedder: Arc::new(HashEmbedder::default()),
        segmenter: Arc::new(segmenter()),
    }
}

pub fn load_script(path: &std::path::Path) -> Result<ScriptFile, ScriptedError> {
    ScriptFile::load(path)
}
