//! Scoring: DER with collar, SDR, cpWER, and RTTM I/O.

mod assignment;
mod der;
mod rttm;
mod sdr;
mod wer;

pub use assignment::{exhaustive_assignment, hungarian};
pub use der::{der, DerReport, DEFAULT_COLLAR_S};
pub use rttm::{parse_rttm, read_rttm, render_rttm, write_rttm, DiarAnnotation, Track};
pub use sdr::{sdr, SDR_ERROR_FLOOR};
pub use wer::{cpwer, cpwer_with, edit_distance, normalize_words, AssignmentMethod, CpwerReport, TranscriptSet};
