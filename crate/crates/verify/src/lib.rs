//! Fixture bundle shared by the acceptance target.

pub const CROP_CARD: &str = include_str!("../../core/fixtures/card_crop_health.txt");
pub const LOAN_CARD: &str = include_str!("../../core/fixtures/card_loan_screening.txt");
pub const DAA: &str = include_str!("../../core/fixtures/policy_daa.txt");
pub const ARS: &str = include_str!("../../core/fixtures/policy_ars.html");
pub const SCORE_TABLE_SAMPLE: &str = include_str!("../../core/fixtures/score_table_sample.md");
pub const RATINGS: &str = include_str!("../../core/fixtures/ratings.csv");
