//! Aggregate F1 cells into results tables, compare against published
//! summaries and state-of-the-art scores, and compute relative gains.

use memescope::analysis::{aggregate, best_cell_gains, relative_gain, sota_delta, PublishedTables, ResultEntry, SotaTable};
use memescope::corpus::TaskId;
use memescope::text::round_half_away;

pub fn main() {
    let published = PublishedTables::bundled();
    let sota = SotaTable::bundled();
    for table in &published.tables {
        let agg = table.aggregate().expect("published grid is complete");
        println!("== {} ==\n{}", table.title, agg.render_text(Some(&sota)));
        for d in table.check().expect("grid checks") {
            println!("  mismatch {:?} {}: printed {:.2}, recomputed {:.4}", d.kind, d.key, d.published, d.recomputed);
        }
    }

    let prompting = published.get("prompting").unwrap().aggregate().unwrap();
    let tuned = published.get("adapter_tuning").unwrap().aggregate().unwrap();
    for g in best_cell_gains(&tuned, &prompting).unwrap() {
        println!("{}: {:.2} vs {:.2} -> {:+.2}%", g.task_id, g.new_score, g.base_score, g.relative_gain_percent);
    }
    for d in sota_delta(&tuned, &sota).unwrap() {
        println!("{} best {:.2} ({}) vs SOTA {:.2}: {:+.2}", d.task_id, d.best, d.best_row, d.sota, d.delta);
    }

    // ad-hoc results from your own runs
    let mine = aggregate(&[
        ResultEntry::new("my-vlm", "ZS", TaskId::SN, 31.2),
        ResultEntry::new("my-vlm", "ZS", TaskId::MV, 48.9),
        ResultEntry::new("my-vlm", "FSC", TaskId::SN, 36.4),
        ResultEntry::new("my-vlm", "FSC", TaskId::MV, 52.0),
    ])
    .unwrap();
    print!("{}", mine.render_text(Some(&sota)));
    println!("FSC over ZS on SN: {:+.2}%", round_half_away(relative_gain(36.4, 31.2).unwrap(), 2));
}
