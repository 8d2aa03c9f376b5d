//! Evaluation-set synthesis over a labeled corpus, model evaluation and
//! report emission.

mod corpus;
mod evaluate;
mod report;
mod set;

pub use corpus::{anchor_segment, load_manifest, Corpus, CorpusEntry, CorpusManifest, ManifestItem, SkippedItem};
pub use evaluate::{evaluate, EvalModel, EvalOptions};
pub use report::{
    emit_report, markdown_table, parse_report_csv, parse_report_json, render_report, report_csv, report_json, CsvRow,
    ReportFormat,
};
pub use set::{
    build_set, load_record_audio, read_set, set_json, write_set, BenchmarkSet, BuiltSet, MixtureRecord, Protocol,
    ProtocolParams, SET_FILE, SET_VERSION,
};
