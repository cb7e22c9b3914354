mod mapsswe;
mod report;
mod wer;

pub use mapsswe::{from_differences, mapsswe, SignificanceResult, ALPHA};
pub use report::{csv_string, fmt2, read_scores_csv, scores_csv, significance_csv, wer_table_csv, UttScore, WerSummary};
pub use wer::{align, wer, Alignment};
