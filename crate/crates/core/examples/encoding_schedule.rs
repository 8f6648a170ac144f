//! Prints the frequency ramp and the occlusion weight ramp for a run.

use declutter::field::band_mask;
use declutter::losses::{frequency_max, occ_weight, ScheduleConfig, ScheduleState};

fn main() -> declutter::Result<()> {
    let total = 200_000;
    let s = ScheduleState::resolve(total, &ScheduleConfig::default())?;
    println!("t_freq_end={} t_c={} t_end={}", s.t_freq_end, s.t_c, s.t_end);
    println!("{:>7} {:>6} {:>8}  bands", "t", "f_max", "w_occ");
    for t in [0, 50, 100, 150, 200, 5_000, 10_000, 15_000, 20_000, 40_000] {
        let f = frequency_max(t, &s, 10);
        let bands: String = band_mask(10, f, false)
            .iter()
            .map(|&m| if m > 0.0 { '#' } else { '.' })
            .collect();
        println!("{t:>7} {f:>6.2} {:>8.4}  {bands}", occ_weight(t, &s));
    }
    Ok(())
}
