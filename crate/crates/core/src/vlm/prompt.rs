//! Scene-agnostic prompt template.

use super::RegionQuery;

const HEADER: &str = "You are looking at one photograph from a small set of photos of the same place, taken from different viewpoints at different times. Some regions of the photo are highlighted with a colored overlay, and each highlighted region carries a numeric identifier drawn near its center.

Task: for every identifier, decide whether the highlighted region shows static scene structure (a permanent part of the environment that would appear in every photo of this place) or a transient/movable occluder (a person, animal, vehicle, or object that could be absent or moved in other photos). Large uniform areas such as sky, walls, floors, ground and distant background count as static structure.
";

const FOOTER: &str = "
Answer first with a machine-readable block that has exactly one line per identifier, in this exact form and nothing else on the line:
ID: static|transient - reason

Use the bare number for ID, one of the words static or transient, and a reason of at most ten words. After the block, give a brief analysis of how you reached each decision.
";

/// Prompt text plus the PNG-encoded annotated image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    pub image_png: Vec<u8>,
}

pub fn prompt_text(labels: &[u32]) -> String {
    let ids: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
    let mut text = String::from(HEADER);
    text.push_str(&format!("\nIdentifiers to classify: {}\n", ids.join(", ")));
    text.push_str(FOOTER);
    text
}

pub fn encode_png(img: &image::RgbImage) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .expect("in-memory png encoding");
    buf.into_inner()
}

/// Builds the request for one annotated view.
pub fn build_prompt(query: &RegionQuery) -> Prompt {
    let labels: Vec<u32> = query.regions.iter().map(|r| r.label).collect();
    Prompt {
        text: prompt_text(&labels),
        image_png: encode_png(&query.annotated_image),
    }
}
