//! Hanyu Pinyin initials, finals and the table of legal combinations.
//!
//! Finals are kept in their written (surface) form: `ju` splits as `j` + `u`,
//! `yuan` as `y` + `uan`, `lüe` as `l` + `üe`. Concatenating initial and final
//! therefore always reproduces the written syllable.

/// Marker for the zero initial (`an`, `er`, `ou`, ...).
pub const ZERO_INITIAL: &str = "∅";

/// The 23 initials, `y` and `w` included.
pub const INITIALS: [&str; 23] = [
    "b", "p", "m", "f", "d", "t", "n", "l", "g", "k", "h", "j", "q", "x", "zh", "ch", "sh", "r", "z", "c", "s", "y",
    "w",
];

pub const FINALS: [&str; 34] = [
    "a", "o", "e", "i", "u", "ü", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng", "ong", "er", "ia", "ie", "iao",
    "iu", "ian", "in", "iang", "ing", "iong", "ua", "uo", "uai", "ui", "uan", "un", "uang", "ue", "üe",
];

const JQX: &[&str] = &[
    "i", "ia", "ie", "iao", "iu", "ian", "in", "iang", "ing", "iong", "u", "ue", "uan", "un",
];

/// Legal finals per initial.
const COMBINATIONS: &[(&str, &[&str])] = &[
    (
        ZERO_INITIAL,
        &["a", "o", "e", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng", "er"],
    ),
    (
        "b",
        &[
            "a", "o", "ai", "ei", "ao", "an", "en", "ang", "eng", "i", "ie", "iao", "ian", "in", "ing", "u",
        ],
    ),
    (
        "p",
        &[
            "a", "o", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng", "i", "ie", "iao", "ian", "in", "ing", "u",
        ],
    ),
    (
        "m",
        &[
            "a", "o", "e", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng", "i", "ie", "iao", "iu", "ian", "in",
            "ing", "u",
        ],
    ),
    ("f", &["a", "o", "ei", "ou", "an", "en", "ang", "eng", "iao", "u"]),
    (
        "d",
        &[
            "a", "e", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng", "ong", "i", "ia", "ie", "iao", "iu", "ian",
            "ing", "u", "uo", "ui", "uan", "un",
        ],
    ),
    (
        "t",
        &[
            "a", "e", "ai", "ei", "ao", "ou", "an", "ang", "eng", "ong", "i", "ie", "iao", "ian", "ing", "u", "uo",
            "ui", "uan", "un",
        ],
    ),
    (
        "n",
        &[
            "a", "e", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng", "ong", "i", "ie", "iao", "iu", "ian", "in",
            "iang", "ing", "u", "uo", "uan", "un", "ü", "üe",
        ],
    ),
    (
        "l",
        &[
            "a", "o", "e", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng", "ong", "i", "ia", "ie", "iao", "iu",
            "ian", "in", "iang", "ing", "u", "uo", "uan", "un", "ü", "üe",
        ],
    ),
    (
        "g",
        &[
            "a", "e", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng", "ong", "u", "ua", "uo", "uai", "ui", "uan",
            "un", "uang",
        ],
    ),
    (
        "k",
        &[
            "a", "e", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng", "ong", "u", "ua", "uo", "uai", "ui", "uan",
            "un", "uang",
        ],
    ),
    (
        "h",
        &[
            "a", "e", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng", "ong", "u", "ua", "uo", "uai", "ui", "uan",
            "un", "uang",
        ],
    ),
    ("j", JQX),
    ("q", JQX),
    ("x", JQX),
    (
        "zh",
        &[
            "a", "e", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng", "ong", "i", "u", "ua", "uo", "uai", "ui",
            "uan", "un", "uang",
        ],
    ),
    (
        "ch",
        &[
            "a", "e", "ai", "ao", "ou", "an", "en", "ang", "eng", "ong", "i", "u", "ua", "uo", "uai", "ui", "uan",
            "un", "uang",
        ],
    ),
    (
        "sh",
        &[
            "a", "e", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng", "i", "u", "ua", "uo", "uai", "ui", "uan", "un",
            "uang",
        ],
    ),
    (
        "r",
        &[
            "e", "ao", "ou", "an", "en", "ang", "eng", "ong", "i", "u", "ua", "uo", "ui", "uan", "un",
        ],
    ),
    (
        "z",
        &[
            "a", "e", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng", "ong", "i", "u", "uo", "ui", "uan", "un",
        ],
    ),
    (
        "c",
        &[
            "a", "e", "ai", "ao", "ou", "an", "en", "ang", "eng", "ong", "i", "u", "uo", "ui", "uan", "un",
        ],
    ),
    (
        "s",
        &[
            "a", "e", "ai", "ao", "ou", "an", "en", "ang", "eng", "ong", "i", "u", "uo", "ui", "uan", "un",
        ],
    ),
    (
        "y",
        &[
            "a", "o", "e", "ao", "ou", "an", "ang", "i", "in", "ing", "ong", "u", "uan", "ue", "un",
        ],
    ),
    ("w", &["a", "o", "ai", "ei", "an", "en", "ang", "eng", "u"]),
];

pub(crate) fn intern_initial(s: &str) -> Option<&'static str> {
    if s == ZERO_INITIAL {
        return Some(ZERO_INITIAL);
    }
    INITIALS.iter().copied().find(|&i| i == s)
}

pub(crate) fn intern_final(s: &str) -> Option<&'static str> {
    FINALS.iter().copied().find(|&f| f == s)
}

pub fn is_legal(initial: &str, fin: &str) -> bool {
    COMBINATIONS
        .iter()
        .find(|(i, _)| *i == initial)
        .is_some_and(|(_, finals)| finals.contains(&fin))
}

/// Every legal toneless syllable, in chart order.
pub fn all_syllables() -> Vec<String> {
    COMBINATIONS
        .iter()
        .flat_map(|(initial, finals)| {
            finals.iter().map(move |f| {
                if *initial == ZERO_INITIAL {
                    f.to_string()
                } else {
                    format!("{initial}{f}")
                }
            })
        })
        .collect()
}
