use std::collections::{BTreeMap, HashMap};

use chrono::{Duration, NaiveDate};
use mrp_core::data::{
    aggregate_to_cells, build_poststrat_table, filter_geography, impute_missing,
    link_zip_predictors, parse_records, standardize_predictors, Age, AgeBins, Cell, CellTable,
    CrosswalkRow, CrosswalkTable, GeoPredictorTable, GeoRow, PopulationRow, Race, Record,
    RecordSet, SchemaConfig, Sex, TractRow, TractTable, Zip,
};
use mrp_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn zip(s: &str) -> Zip {
    Zip::new(s).unwrap()
}

fn day(n: i64) -> NaiveDate {
    NaiveDate::from_ymd_opt(2021, 11, 1).unwrap() + Duration::days(n)
}

/// Counts rows a strict reading of the schema would accept, line by line.
fn revalidate(text: &str) -> (usize, usize) {
    let (mut ok, mut bad) = (0, 0);
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let zip_ok = f[4].len() == 5 && f[4].chars().all(|c| c.is_ascii_digit());
        let result_ok = matches!(f[5], "0" | "1" | "positive" | "negative");
        let date_ok = NaiveDate::parse_from_str(f[6], "%Y-%m-%d").is_ok();
        if zip_ok && result_ok && date_ok {
            ok += 1;
        } else {
            bad += 1;
        }
    }
    (ok, bad)
}

fn synthetic_records(rows: usize, malformed_every: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from("record_id,sex,race,age,zip,result,result_date\n");
    for i in 0..rows {
        let sex = ["female", "male", "F", "M", ""][rng.random_range(0..5)];
        let race = ["White", "Black", "Asian", "black", ""][rng.random_range(0..5)];
        let age = rng.random_range(0..95u32).to_string();
        let mut zip = format!("{}", 48100 + rng.random_range(0..30));
        let mut result = ["0", "1", "positive", "negative"][rng.random_range(0..4)].to_string();
        let mut date = day(rng.random_range(0..200)).to_string();
        if malformed_every > 0 && i % malformed_every == malformed_every - 1 {
            match (i / malformed_every) % 3 {
                0 => zip = "482A1".into(),
                1 => result = "maybe".into(),
                _ => date = "2021-13-45".into(),
            }
        }
        out.push_str(&format!("r{i},{sex},{race},{age},{zip},{result},{date}\n"));
    }
    out
}

#[test]
fn well_formed_file_has_no_rejects() {
    let text = "record_id,sex,race,age,zip,result,result_date\n\
                1,female,White,30,48104,1,2021-11-02\n\
                2,male,Black,71,48105,0,2021-11-09\n\
                3,male,Other,5,48104,0,2021-11-20\n";
    let p = parse_records(text.as_bytes(), &SchemaConfig::default()).unwrap();
    assert_eq!(p.records.len(), 3);
    assert!(p.rejects.is_empty());
}

#[test]
fn bad_zip_is_rejected_with_reason() {
    let text = "record_id,sex,race,age,zip,result,result_date\n\
                1,female,White,30,482A1,1,2021-11-02\n\
                2,female,White,30,48104,1,2021-11-02\n";
    let p = parse_records(text.as_bytes(), &SchemaConfig::default()).unwrap();
    assert_eq!(p.rejects.len(), 1);
    assert_eq!(p.rejects[0].reason, "invalid zip");
    assert_eq!(p.rejects[0].line, 2);
}

#[test]
fn thousand_rows_match_independent_validator() {
    let text = synthetic_records(1000, 50, 7);
    let p = parse_records(text.as_bytes(), &SchemaConfig::default()).unwrap();
    let (ok, bad) = revalidate(&text);
    assert_eq!((ok, bad), (980, 20));
    assert_eq!(p.records.len(), ok);
    assert_eq!(p.rejects.len(), bad);
    assert_eq!(p.total_rows, 1000);
}

#[test]
fn mostly_rejected_input_is_fatal() {
    let text = synthetic_records(100, 1, 1);
    let err = parse_records(text.as_bytes(), &SchemaConfig::default()).unwrap_err();
    assert!(matches!(err, Error::TooManyRejects { rejected: 100, total: 100, .. }));
}

#[test]
fn missing_required_column_is_fatal() {
    let text = "record_id,sex,race,age,zipcode,result,result_date\n";
    let err = parse_records(text.as_bytes(), &SchemaConfig::default()).unwrap_err();
    assert!(matches!(err, Error::MissingColumn { .. }));
}

#[test]
fn tab_delimited_input_with_custom_date_format() {
    let schema = SchemaConfig {
        delimiter: "\\t".into(),
        date_format: Some("%m/%d/%Y".into()),
        ..SchemaConfig::default()
    };
    let text = "record_id\tsex\trace\tage\tzip\tresult\tresult_date\n\
                1\tF\tWhite\t30\t48104\tpositive\t11/02/2021\n";
    let p = parse_records(text.as_bytes(), &schema).unwrap();
    assert_eq!(p.records.records[0].result_date, day(1));
    assert_eq!(p.records.records[0].result, 1);
}

fn record(i: usize, sex: Option<Sex>, race: Option<Race>, age: Option<u32>) -> Record {
    Record {
        record_id: i.to_string(),
        sex,
        race,
        age: age.map(Age::Years),
        zip: zip("48104"),
        result: (i % 2) as u8,
        result_date: day((i % 30) as i64),
    }
}

fn race_fixture(missing: usize) -> RecordSet {
    let mut records = Vec::new();
    for (race, k) in [(Race::White, 6), (Race::Black, 3), (Race::Other, 1)] {
        for _ in 0..k {
            records.push(record(records.len(), Some(Sex::Female), Some(race), Some(40)));
        }
    }
    for _ in 0..missing {
        records.push(record(records.len(), Some(Sex::Male), None, Some(40)));
    }
    RecordSet { records }
}

fn imputed_shares(set: &RecordSet, skip: usize) -> [f64; 3] {
    let mut counts = [0usize; 3];
    for r in &set.records[skip..] {
        counts[match r.race.unwrap() {
            Race::White => 0,
            Race::Black => 1,
            Race::Other => 2,
        }] += 1;
    }
    let n = (set.len() - skip) as f64;
    counts.map(|c| c as f64 / n)
}

#[test]
fn imputation_follows_observed_frequencies() {
    let (out, report) = impute_missing(&race_fixture(1000), 3).unwrap();
    assert_eq!(report.race, 1000);
    let s = imputed_shares(&out, 10);
    for (got, want) in s.iter().zip([0.6, 0.3, 0.1]) {
        assert!((got - want).abs() <= 0.03, "{s:?}");
    }
}

#[test]
fn imputation_converges_at_large_n() {
    let (out, _) = impute_missing(&race_fixture(100_000), 11).unwrap();
    let s = imputed_shares(&out, 10);
    for (got, want) in s.iter().zip([0.6, 0.3, 0.1]) {
        assert!((got - want).abs() <= 0.01, "{s:?}");
    }
}

#[test]
fn imputation_is_deterministic_and_identity_without_gaps() {
    let set = race_fixture(50);
    let a = impute_missing(&set, 5).unwrap();
    let b = impute_missing(&set, 5).unwrap();
    assert_eq!(serde_json::to_string(&a.0).unwrap(), serde_json::to_string(&b.0).unwrap());

    let complete = race_fixture(0);
    let (out, report) = impute_missing(&complete, 5).unwrap();
    assert_eq!(out, complete);
    assert_eq!((report.sex, report.race, report.age), (0, 0, 0));
}

#[test]
fn fully_missing_column_is_fatal() {
    let set = RecordSet {
        records: (0..5).map(|i| record(i, Some(Sex::Male), Some(Race::White), None)).collect(),
    };
    assert!(matches!(impute_missing(&set, 1), Err(Error::NothingToImpute(c)) if c == "age"));
}

#[test]
fn aggregation_examples() {
    let set = RecordSet {
        records: vec![
            Record { result: 0, ..record(0, Some(Sex::Male), Some(Race::White), Some(30)) },
            Record { result: 1, ..record(1, Some(Sex::Male), Some(Race::White), Some(31)) },
        ],
    };
    let mut set = set;
    set.records[0].result_date = day(0);
    set.records[1].result_date = day(3);
    let cells = aggregate_to_cells(&set, &AgeBins::default(), Some(day(0))).unwrap();
    assert_eq!(cells.rows.len(), 1);
    assert_eq!((cells.rows[0].n_tests, cells.rows[0].n_positive), (2, 1));

    set.records[1].result_date = day(8);
    let cells = aggregate_to_cells(&set, &AgeBins::default(), Some(day(0))).unwrap();
    assert_eq!(cells.rows.iter().map(|c| c.week).max(), Some(1));
}

#[test]
fn week_origin_defaults_to_monday_before_first_result() {
    // 2021-11-03 is a Wednesday.
    let set = RecordSet {
        records: vec![Record {
            result_date: day(2),
            ..record(0, Some(Sex::Male), Some(Race::White), Some(30))
        }],
    };
    let cells = aggregate_to_cells(&set, &AgeBins::default(), None).unwrap();
    assert_eq!(cells.week_origin, Some(day(0)));
}

#[test]
fn age_outside_bins_is_fatal() {
    let bins = AgeBins::from_breaks(&[18, 65]).unwrap();
    let set = RecordSet {
        records: vec![record(0, Some(Sex::Male), Some(Race::White), Some(4))],
    };
    assert!(matches!(
        aggregate_to_cells(&set, &bins, None),
        Err(Error::AgeOutOfBins(v)) if v == "4"
    ));
}

#[test]
fn aggregation_matches_brute_force_group_by() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let bins = AgeBins::default();
    let records: Vec<Record> = (0..500)
        .map(|i| Record {
            record_id: i.to_string(),
            sex: Some(Sex::ALL[rng.random_range(0..2)]),
            race: Some(Race::ALL[rng.random_range(0..3)]),
            age: Some(Age::Years(rng.random_range(0..90))),
            zip: zip(&format!("{}", 48100 + rng.random_range(0..4))),
            result: rng.random_range(0..2),
            result_date: day(rng.random_range(0..60)),
        })
        .collect();
    let set = RecordSet { records };
    let cells = aggregate_to_cells(&set, &bins, Some(day(0))).unwrap();

    let mut oracle: HashMap<String, (u64, u64)> = HashMap::new();
    for r in &set.records {
        let Age::Years(a) = r.age.clone().unwrap() else { unreachable!() };
        let group = match a {
            0..=17 => "0-17",
            18..=34 => "18-34",
            35..=49 => "35-49",
            50..=64 => "50-64",
            65..=74 => "65-74",
            _ => "75+",
        };
        let week = (r.result_date - day(0)).num_days() / 7;
        let key = format!("{}|{group}|{}|{}|{week}", r.sex.unwrap(), r.race.unwrap(), r.zip);
        let e = oracle.entry(key).or_default();
        e.0 += 1;
        e.1 += u64::from(r.result);
    }
    assert_eq!(cells.rows.len(), oracle.len());
    for c in &cells.rows {
        assert_eq!(oracle[&c.id()], (c.n_tests, c.n_positive), "{}", c.id());
    }
    assert_eq!(cells.total_tests(), 500);
    assert_eq!(
        cells.total_positive(),
        set.records.iter().map(|r| u64::from(r.result)).sum::<u64>()
    );
}

fn cell(z: &str, week: u32, n: u64) -> Cell {
    Cell {
        sex: Sex::Female,
        age_group: "18-34".into(),
        race: Race::White,
        zip: zip(z),
        week,
        n_tests: n,
        n_positive: n / 3,
    }
}

fn states(pairs: &[(&str, &str)]) -> BTreeMap<Zip, String> {
    pairs.iter().map(|(z, s)| (zip(z), s.to_string())).collect()
}

#[test]
fn small_zips_are_dropped() {
    let cells = CellTable {
        week_origin: None,
        rows: vec![cell("48101", 0, 4), cell("48101", 1, 2), cell("48102", 0, 5)],
    };
    let (out, report) =
        filter_geography(&cells, &states(&[("48101", "26"), ("48102", "26")])).unwrap();
    assert_eq!(out.zips().into_iter().collect::<Vec<_>>(), vec![zip("48101")]);
    assert_eq!(report.dropped_zips, vec![("48102".to_string(), 5)]);
}

#[test]
fn small_states_are_dropped_after_zips() {
    // OH holds 5 of 1000 records once the zip pass is done.
    let cells = CellTable {
        week_origin: None,
        rows: vec![
            cell("48101", 0, 995),
            cell("43001", 0, 5),
            cell("43003", 0, 6),
            cell("43005", 0, 3),
        ],
    };
    let map = states(&[("48101", "26"), ("43001", "39"), ("43003", "39"), ("43005", "39")]);
    let (out, report) = filter_geography(&cells, &map).unwrap();
    // 43003 survives the zip pass (6 > 5), then OH has 6 / 1001 < 1%.
    assert_eq!(out.zips().len(), 1);
    assert_eq!(report.dropped_states, vec![("39".to_string(), 6)]);
}

#[test]
fn filter_identity_and_errors() {
    let cells = CellTable {
        week_origin: None,
        rows: vec![cell("48101", 0, 6), cell("48103", 0, 9)],
    };
    let map = states(&[("48101", "26"), ("48103", "26")]);
    let (out, _) = filter_geography(&cells, &map).unwrap();
    assert_eq!(out, cells);

    let tiny = CellTable {
        week_origin: None,
        rows: vec![cell("48101", 0, 2)],
    };
    assert!(filter_geography(&tiny, &map).is_err());
    assert!(matches!(
        filter_geography(&cells, &states(&[("48101", "26")])),
        Err(Error::UnknownState(_))
    ));
}

proptest! {
    #[test]
    fn filtering_is_monotone_and_idempotent(
        counts in proptest::collection::vec((0usize..12, 0u32..4, 1u64..6), 1..60)
    ) {
        let rows: Vec<Cell> = {
            let mut m: BTreeMap<(usize, u32), u64> = BTreeMap::new();
            for (z, w, n) in counts {
                *m.entry((z, w)).or_default() += n;
            }
            m.into_iter().map(|((z, w), n)| cell(&format!("{}", 48000 + z), w, n)).collect()
        };
        let cells = CellTable { week_origin: None, rows };
        let map: BTreeMap<Zip, String> = (0..12)
            .map(|z| (zip(&format!("{}", 48000 + z)), if z < 10 { "26" } else { "39" }.to_string()))
            .collect();
        if let Ok((once, _)) = filter_geography(&cells, &map) {
            prop_assert!(once.rows.len() <= cells.rows.len());
            prop_assert!(once.total_tests() <= cells.total_tests());
            let (twice, _) = filter_geography(&once, &map).unwrap();
            prop_assert_eq!(twice, once);
        }
    }

    #[test]
    fn standardization_round_trips(values in proptest::collection::vec(-1e3f64..1e3, 3..40)) {
        let distinct = {
            let mut v = values.clone();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v.len()
        };
        prop_assume!(distinct >= 2);
        let geo = single_column(&values);
        let s = standardize_predictors(&geo).unwrap();
        let col = s.column(0);
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((sd - 1.0).abs() < 1e-9);
        for (a, b) in s.unstandardize().column(0).iter().zip(&values) {
            prop_assert!((a - b).abs() < 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn poststrat_table_is_complete(
        n_zips in 1usize..6, breaks in proptest::sample::select(vec![vec![0u32, 50], vec![0, 18, 35, 50, 65, 75], vec![0, 40, 60]]),
        drop in proptest::collection::vec(any::<bool>(), 0..200)
    ) {
        let bins = AgeBins::from_breaks(&breaks).unwrap();
        let zips: Vec<Zip> = (0..n_zips).map(|i| zip(&format!("{}", 48100 + i))).collect();
        let mut pop = Vec::new();
        let mut i = 0;
        for z in &zips {
            for sex in Sex::ALL {
                for race in Race::ALL {
                    for age in [3u32, 20, 45, 70, 90] {
                        let keep = drop.get(i).is_none_or(|d| !d);
                        i += 1;
                        if keep || pop.is_empty() {
                            pop.push(PopulationRow { zip: z.clone(), sex, age: Age::Years(age), race, count: 10.0 + i as f64 });
                        }
                    }
                }
            }
        }
        let covered: std::collections::BTreeSet<&Zip> = pop.iter().map(|r| &r.zip).collect();
        let retained: Vec<Zip> = zips.iter().filter(|z| covered.contains(z)).cloned().collect();
        let t = build_poststrat_table(&pop, &retained, &bins).unwrap();
        prop_assert_eq!(t.rows.len(), 2 * bins.bins().len() * 3 * retained.len());
        let source: f64 = pop.iter().filter(|r| retained.contains(&r.zip)).map(|r| r.count).sum();
        prop_assert!((t.total() - source).abs() <= 1e-6 * source);
    }
}

fn single_column(values: &[f64]) -> GeoPredictorTable {
    GeoPredictorTable {
        columns: vec!["x".into()],
        rows: values
            .iter()
            .enumerate()
            .map(|(i, v)| GeoRow {
                zip: zip(&format!("{:05}", 10000 + i)),
                county_fips: "26161".into(),
                values: vec![*v],
            })
            .collect(),
        scales: vec![None],
    }
}

#[test]
fn standardize_examples() {
    let s = standardize_predictors(&single_column(&[1.0, 2.0, 3.0])).unwrap();
    assert_eq!(s.column(0), vec![-1.0, 0.0, 1.0]);
    let again = standardize_predictors(&s).unwrap();
    for (a, b) in again.column(0).iter().zip(s.column(0)) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(matches!(
        standardize_predictors(&single_column(&[2.0, 2.0, 2.0])),
        Err(Error::ZeroVariance(c)) if c == "x"
    ));
}

#[test]
fn poststrat_cross_product_and_zero_fill() {
    let bins = AgeBins::from_breaks(&[0, 50]).unwrap();
    let mut pop = Vec::new();
    for sex in Sex::ALL {
        for race in Race::ALL {
            for age in [10, 60] {
                if !(sex == Sex::Male && race == Race::Other && age == 60) {
                    pop.push(PopulationRow { zip: zip("48104"), sex, age: Age::Years(age), race, count: 5.0 });
                }
            }
        }
    }
    let t = build_poststrat_table(&pop, &[zip("48104")], &bins).unwrap();
    assert_eq!(t.rows.len(), 12);
    let hole = t
        .rows
        .iter()
        .find(|r| r.sex == Sex::Male && r.race == Race::Other && r.age_group == "50+")
        .unwrap();
    assert_eq!(hole.population, 0.0);
    assert!(build_poststrat_table(&pop, &[zip("48105")], &bins).is_err());
}

#[test]
fn linking_examples() {
    let crosswalk = CrosswalkTable {
        rows: vec![
            CrosswalkRow { zip: zip("48104"), tract_id: "26161400100".into(), residential_ratio: 0.4 },
            CrosswalkRow { zip: zip("48104"), tract_id: "26163400200".into(), residential_ratio: 0.6 },
            CrosswalkRow { zip: zip("48105"), tract_id: "26161400300".into(), residential_ratio: 0.5 },
            CrosswalkRow { zip: zip("48105"), tract_id: "26099400400".into(), residential_ratio: 0.5 },
        ],
    };
    let tracts = TractTable {
        columns: vec!["adi".into()],
        rows: vec![
            TractRow { tract_id: "26161400100".into(), population: 100.0, values: vec![40.0] },
            TractRow { tract_id: "26163400200".into(), population: 300.0, values: vec![80.0] },
            TractRow { tract_id: "26161400300".into(), population: 50.0, values: vec![12.0] },
            TractRow { tract_id: "26099400400".into(), population: 0.0, values: vec![99.0] },
        ],
    };
    let geo = link_zip_predictors(&crosswalk, &tracts, &[zip("48104"), zip("48105")]).unwrap();
    assert_eq!(geo.rows[0].values[0], 70.0);
    assert_eq!(geo.rows[0].county_fips, "26163");
    // zero-population tract ignored for values; tie in ratio goes to the smaller fips
    assert_eq!(geo.rows[1].values[0], 12.0);
    assert_eq!(geo.rows[1].county_fips, "26099");

    assert!(matches!(
        link_zip_predictors(&crosswalk, &tracts, &[zip("48109")]),
        Err(Error::OrphanZips(z)) if z == vec!["48109".to_string()]
    ));
}

#[test]
fn fifty_zips_match_weighted_mean_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut crosswalk = CrosswalkTable::default();
    let mut tracts = TractTable {
        columns: vec!["income".into(), "adi".into()],
        rows: Vec::new(),
    };
    let mut expected: Vec<(Zip, [f64; 2])> = Vec::new();
    for z in 0..50 {
        let zc = zip(&format!("{}", 48000 + z));
        let k = rng.random_range(1..5);
        let (mut num, mut den) = ([0.0; 2], 0.0);
        for t in 0..k {
            let id = format!("26{:03}{:06}", 1 + 2 * (t % 3), z * 10 + t);
            let pop = rng.random_range(1.0..5000.0f64).round();
            let v = [rng.random_range(20e3..120e3), rng.random_range(1.0..100.0)];
            crosswalk.rows.push(CrosswalkRow { zip: zc.clone(), tract_id: id.clone(), residential_ratio: 1.0 / k as f64 });
            tracts.rows.push(TractRow { tract_id: id, population: pop, values: v.to_vec() });
            for c in 0..2 {
                num[c] += pop * v[c];
            }
            den += pop;
        }
        expected.push((zc, [num[0] / den, num[1] / den]));
    }
    let zips: Vec<Zip> = expected.iter().map(|(z, _)| z.clone()).collect();
    let geo = link_zip_predictors(&crosswalk, &tracts, &zips).unwrap();
    for (z, e) in &expected {
        let row = geo.row(z).unwrap();
        for c in 0..2 {
            assert!((row.values[c] - e[c]).abs() <= 1e-9 * e[c].abs(), "{z}");
        }
    }
}

#[test]
fn crosswalk_ratio_over_one_is_invalid() {
    let crosswalk = CrosswalkTable {
        rows: vec![
            CrosswalkRow { zip: zip("48104"), tract_id: "26161400100".into(), residential_ratio: 0.7 },
            CrosswalkRow { zip: zip("48104"), tract_id: "26161400200".into(), residential_ratio: 0.7 },
        ],
    };
    assert!(crosswalk.validate().is_err());
    assert_eq!(crosswalk.zip_states()[&zip("48104")], "26");
}
