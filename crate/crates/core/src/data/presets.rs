//! Built-in schemas and feature partitions for the three benchmark datasets.
//!
//! Banking and Adult Income use the public UCI column names and level lists;
//! with them the encoded shard widths come out as 57/3/20 and 27/63/16.
//! The Taobao schema is only used with the synthetic generator.

use super::{ColumnSpec, LabelSpec, PartitionSpec, Schema};

#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub schema: Schema,
    pub active_columns: Vec<&'static str>,
    pub clusters: Vec<Vec<&'static str>>,
    /// Row count of the public dataset (synthetic default for Taobao).
    pub rows: usize,
    /// Encoded widths: active party first, then each cluster.
    pub expected_widths: Vec<usize>,
}

impl Preset {
    /// Two members per cluster holding halves of `[0, n_ids)`.
    pub fn partition(&self, n_ids: u64) -> PartitionSpec {
        let clusters: Vec<&[&str]> = self.clusters.iter().map(|c| c.as_slice()).collect();
        PartitionSpec::even_split(&self.active_columns, &clusters, 2, n_ids)
    }
}

pub fn by_name(name: &str) -> Option<Preset> {
    match name {
        "banking" | "bank" => Some(banking()),
        "adult" | "adult-income" => Some(adult()),
        "taobao" => Some(taobao()),
        _ => None,
    }
}

fn refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn cat(name: &str, levels: &[&str]) -> ColumnSpec {
    ColumnSpec::categorical(name, levels)
}

fn num(name: &str, mean: f64, std: f64) -> ColumnSpec {
    ColumnSpec::numeric(name, mean, std)
}

const YES_NO: &[&str] = &["no", "yes"];

pub fn banking() -> Preset {
    let days: Vec<String> = (1..=31).map(|d| d.to_string()).collect();
    let schema = Schema {
        columns: vec![
            num("age", 40.9, 10.6),
            cat(
                "job",
                &[
                    "admin.", "blue-collar", "entrepreneur", "housemaid", "management", "retired",
                    "self-employed", "services", "student", "technician", "unemployed", "unknown",
                ],
            ),
            cat("marital", &["divorced", "married", "single"]),
            cat("education", &["primary", "secondary", "tertiary", "unknown"]),
            cat("default", YES_NO),
            num("balance", 1362.3, 3044.8),
            cat("housing", YES_NO),
            cat("loan", YES_NO),
            cat("contact", &["cellular", "telephone", "unknown"]),
            cat("day", &refs(&days)),
            cat(
                "month",
                &["jan", "feb", "mar", "apr", "may", "jun", "jul", "aug", "sep", "oct", "nov", "dec"],
            ),
            num("campaign", 2.76, 3.10),
            num("pdays", 40.2, 100.1),
            num("previous", 0.58, 2.30),
            cat("poutcome", &["failure", "other", "success", "unknown"]),
        ],
        label: LabelSpec {
            name: "y".into(),
            positive: vec!["yes".into()],
        },
        delimiter: None,
    };
    Preset {
        name: "banking",
        schema,
        active_columns: vec![
            "housing", "loan", "contact", "day", "month", "campaign", "pdays", "previous", "poutcome",
        ],
        clusters: vec![vec!["default", "balance"], vec!["age", "job", "marital", "education"]],
        rows: 45_211,
        expected_widths: vec![57, 3, 20],
    }
}

pub fn adult() -> Preset {
    let schema = Schema {
        columns: vec![
            num("age", 38.6, 13.7),
            cat(
                "workclass",
                &[
                    "?", "Federal-gov", "Local-gov", "Never-worked", "Private", "Self-emp-inc",
                    "Self-emp-not-inc", "State-gov", "Without-pay",
                ],
            ),
            cat(
                "education",
                &[
                    "10th", "11th", "12th", "1st-4th", "5th-6th", "7th-8th", "9th", "Assoc-acdm",
                    "Assoc-voc", "Bachelors", "Doctorate", "HS-grad", "Masters", "Preschool",
                    "Prof-school", "Some-college",
                ],
            ),
            cat(
                "marital-status",
                &[
                    "Divorced", "Married-AF-spouse", "Married-civ-spouse", "Married-spouse-absent",
                    "Never-married", "Separated", "Widowed",
                ],
            ),
            cat(
                "occupation",
                &[
                    "?", "Adm-clerical", "Armed-Forces", "Craft-repair", "Exec-managerial",
                    "Farming-fishing", "Handlers-cleaners", "Machine-op-inspct", "Other-service",
                    "Priv-house-serv", "Prof-specialty", "Protective-serv", "Sales", "Tech-support",
                    "Transport-moving",
                ],
            ),
            cat(
                "relationship",
                &["Husband", "Not-in-family", "Other-relative", "Own-child", "Unmarried", "Wife"],
            ),
            cat("race", &["Amer-Indian-Eskimo", "Asian-Pac-Islander", "Black", "Other", "White"]),
            cat("gender", &["Female", "Male"]),
            num("capital-gain", 1079.1, 7452.0),
            num("capital-loss", 87.5, 403.0),
            num("hours-per-week", 40.4, 12.4),
            cat(
                "native-country",
                &[
                    "?", "Cambodia", "Canada", "China", "Columbia", "Cuba", "Dominican-Republic",
                    "Ecuador", "El-Salvador", "England", "France", "Germany", "Greece", "Guatemala",
                    "Haiti", "Holand-Netherlands", "Honduras", "Hong", "Hungary", "India", "Iran",
                    "Ireland", "Italy", "Jamaica", "Japan", "Laos", "Mexico", "Nicaragua",
                    "Outlying-US(Guam-USVI-etc)", "Peru", "Philippines", "Poland", "Portugal",
                    "Puerto-Rico", "Scotland", "South", "Taiwan", "Thailand", "Trinadad&Tobago",
                    "United-States", "Vietnam", "Yugoslavia",
                ],
            ),
        ],
        label: LabelSpec {
            name: "income".into(),
            positive: vec![">50K".into(), ">50K.".into()],
        },
        delimiter: None,
    };
    Preset {
        name: "adult",
        schema,
        active_columns: vec!["workclass", "occupation", "capital-gain", "capital-loss", "hours-per-week"],
        clusters: vec![
            vec!["race", "marital-status", "relationship", "age", "gender", "native-country"],
            vec!["education"],
        ],
        rows: 48_842,
        expected_widths: vec![27, 63, 16],
    }
}

/// Ad-click schema with the Taobao column names. Columns the public
/// description lists for both the active and a passive party are given to
/// the passive cluster only, so column sets stay disjoint.
pub fn taobao() -> Preset {
    let levels = |prefix: &str, n: usize| -> Vec<String> { (0..n).map(|i| format!("{prefix}{i}")).collect() };
    let cate: Vec<String> = levels("c", 100);
    let brand: Vec<String> = levels("b", 60);
    let cms: Vec<String> = levels("g", 13);
    let schema = Schema {
        columns: vec![
            cat("pid", &["430539_1007", "430548_1007"]),
            cat("cms_group_id", &refs(&cms)),
            cat("final_gender_code", &["1", "2"]),
            cat("age_level", &["0", "1", "2", "3", "4", "5", "6"]),
            cat("pvalue_level", &["1", "2", "3"]),
            cat("shopping_level", &["1", "2", "3"]),
            cat("occupation", &["0", "1"]),
            cat("new_user_class_level", &["1", "2", "3", "4"]),
            cat("cate_id", &refs(&cate)),
            cat("brand", &refs(&brand)),
            num("price", 250.0, 400.0),
        ],
        label: LabelSpec {
            name: "clk".into(),
            positive: vec!["1".into()],
        },
        delimiter: None,
    };
    Preset {
        name: "taobao",
        schema,
        active_columns: vec!["pid", "cms_group_id", "new_user_class_level", "cate_id", "brand", "price"],
        clusters: vec![
            vec!["final_gender_code", "age_level", "occupation"],
            vec!["pvalue_level", "shopping_level"],
        ],
        rows: 100_000,
        expected_widths: vec![180, 11, 6],
    }
}

#[cfg(test)]
mod tests {
    use super::super::{encode, synth_generate, vertical_split};
    use super::*;

    fn widths(p: &Preset) -> Vec<usize> {
        let raw = synth_generate(64, &p.schema, 1);
        let enc = encode(&raw, &p.schema, None).unwrap();
        let shards = vertical_split(&enc, &p.partition(64)).unwrap();
        let mut w = vec![shards.active.columns.len()];
        w.extend(shards.passive.iter().step_by(2).map(|s| s.columns.len()));
        w
    }

    #[test]
    fn banking_widths_are_57_3_20() {
        let p = banking();
        assert_eq!(widths(&p), p.expected_widths);
        assert_eq!(p.expected_widths.iter().sum::<usize>(), 80);
    }

    #[test]
    fn adult_widths_are_27_63_16() {
        let p = adult();
        assert_eq!(widths(&p), p.expected_widths);
        assert_eq!(p.expected_widths.iter().sum::<usize>(), 106);
    }

    #[test]
    fn taobao_widths() {
        let p = taobao();
        assert_eq!(widths(&p), p.expected_widths);
    }

    #[test]
    fn lookup() {
        assert_eq!(by_name("bank").unwrap().name, "banking");
        assert!(by_name("mnist").is_none());
    }
}
