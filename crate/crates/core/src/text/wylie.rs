//! Extended Wylie romanization of Tibetan Unicode.
//!
//! Syllables are split into stacks (base letter + subjoined letters + vowel
//! signs). The root stack carries the vowel; when no vowel sign is written, the
//! root is chosen from the prefix/suffix/post-suffix rules and receives the
//! inherent `a`. Code points without a Wylie spelling are written as `\uXXXX`,
//! so pure Tibetan input always produces ASCII.

const ACHUNG: char = '\u{0F60}';
const A_CHEN: char = '\u{0F68}';

fn consonant(c: char) -> Option<&'static str> {
    let s = match c {
        '\u{0F40}' => "k",
        '\u{0F41}' => "kh",
        '\u{0F42}' => "g",
        '\u{0F43}' => "g+h",
        '\u{0F44}' => "ng",
        '\u{0F45}' => "c",
        '\u{0F46}' => "ch",
        '\u{0F47}' => "j",
        '\u{0F49}' => "ny",
        '\u{0F4A}' => "T",
        '\u{0F4B}' => "Th",
        '\u{0F4C}' => "D",
        '\u{0F4D}' => "D+h",
        '\u{0F4E}' => "N",
        '\u{0F4F}' => "t",
        '\u{0F50}' => "th",
        '\u{0F51}' => "d",
        '\u{0F52}' => "d+h",
        '\u{0F53}' => "n",
        '\u{0F54}' => "p",
        '\u{0F55}' => "ph",
        '\u{0F56}' => "b",
        '\u{0F57}' => "b+h",
        '\u{0F58}' => "m",
        '\u{0F59}' => "ts",
        '\u{0F5A}' => "tsh",
        '\u{0F5B}' => "dz",
        '\u{0F5C}' => "dz+h",
        '\u{0F5D}' => "w",
        '\u{0F5E}' => "zh",
        '\u{0F5F}' => "z",
        '\u{0F60}' => "'",
        '\u{0F61}' => "y",
        '\u{0F62}' => "r",
        '\u{0F63}' => "l",
        '\u{0F64}' => "sh",
        '\u{0F65}' => "Sh",
        '\u{0F66}' => "s",
        '\u{0F67}' => "h",
        '\u{0F68}' => "a",
        '\u{0F69}' => "k+Sh",
        '\u{0F6A}' => "R",
        _ => return None,
    };
    Some(s)
}

fn subjoined(c: char) -> Option<&'static str> {
    match c {
        '\u{0FBA}' => Some("W"),
        '\u{0FBB}' => Some("Y"),
        '\u{0FBC}' => Some("R"),
        '\u{0F90}'..='\u{0FB9}' => char::from_u32(c as u32 - 0x50).and_then(consonant),
        _ => None,
    }
}

fn vowel(c: char) -> Option<&'static str> {
    let s = match c {
        '\u{0F71}' => "A",
        '\u{0F72}' => "i",
        '\u{0F73}' => "I",
        '\u{0F74}' => "u",
        '\u{0F75}' => "U",
        '\u{0F76}' => "r-i",
        '\u{0F77}' => "r-I",
        '\u{0F78}' => "l-i",
        '\u{0F79}' => "l-I",
        '\u{0F7A}' => "e",
        '\u{0F7B}' => "ai",
        '\u{0F7C}' => "o",
        '\u{0F7D}' => "au",
        '\u{0F80}' => "-i",
        '\u{0F81}' => "-I",
        _ => return None,
    };
    Some(s)
}

/// Marks written after the vowel.
fn final_mark(c: char) -> Option<&'static str> {
    let s = match c {
        '\u{0F7E}' => "M",
        '\u{0F7F}' => "H",
        '\u{0F82}' => "~M`",
        '\u{0F83}' => "~M",
        '\u{0F84}' => "?",
        '\u{0F39}' => "^",
        '\u{0F35}' => "~X",
        '\u{0F37}' => "X",
        _ => return None,
    };
    Some(s)
}

fn symbol(c: char) -> Option<&'static str> {
    let s = match c {
        '\u{0F0B}' => " ",
        '\u{0F0C}' => "*",
        '\u{0F0D}' => "/",
        '\u{0F0E}' => "//",
        '\u{0F0F}' => ";",
        '\u{0F10}' => "[",
        '\u{0F11}' => "|",
        '\u{0F12}' => "]",
        '\u{0F13}' => "`",
        '\u{0F14}' => ":",
        '\u{0F00}' => "oM",
        '\u{0F04}' => "@",
        '\u{0F05}' => "#",
        '\u{0F06}' => "$",
        '\u{0F07}' => "%",
        '\u{0F08}' => "!",
        '\u{0F20}' => "0",
        '\u{0F21}' => "1",
        '\u{0F22}' => "2",
        '\u{0F23}' => "3",
        '\u{0F24}' => "4",
        '\u{0F25}' => "5",
        '\u{0F26}' => "6",
        '\u{0F27}' => "7",
        '\u{0F28}' => "8",
        '\u{0F29}' => "9",
        '\u{0F3A}' => "<",
        '\u{0F3B}' => ">",
        '\u{0F3C}' => "(",
        '\u{0F3D}' => ")",
        '\u{0F85}' => "&",
        _ => return None,
    };
    Some(s)
}

fn is_syllable_part(c: char) -> bool {
    consonant(c).is_some() || subjoined(c).is_some() || vowel(c).is_some() || final_mark(c).is_some()
}

#[derive(Debug, Default)]
struct Stack {
    base: Option<char>,
    letters: String,
    subjoined: usize,
    vowels: Vec<&'static str>,
    marks: String,
}

impl Stack {
    fn has_vowel(&self) -> bool {
        !self.vowels.is_empty()
    }

    fn single(&self) -> Option<char> {
        (self.subjoined == 0).then_some(self.base).flatten()
    }

    /// Vowel signs merged the way Wylie spells them (a-chung + i → I, ...).
    fn vowel_text(&self) -> String {
        let mut out = String::new();
        let mut i = 0;
        while i < self.vowels.len() {
            let merged = match (self.vowels[i], self.vowels.get(i + 1)) {
                ("A", Some(&"i")) => Some("I"),
                ("A", Some(&"u")) => Some("U"),
                ("A", Some(&"-i")) => Some("-I"),
                _ => None,
            };
            match merged {
                Some(m) => {
                    out.push_str(m);
                    i += 2;
                }
                None => {
                    out.push_str(self.vowels[i]);
                    i += 1;
                }
            }
        }
        out
    }
}

const PREFIXES: [char; 5] = ['\u{0F42}', '\u{0F51}', '\u{0F56}', '\u{0F58}', ACHUNG];
const POST_SUFFIXES: [char; 2] = ['\u{0F66}', '\u{0F51}'];
const SUFFIXES: [char; 10] = [
    '\u{0F42}', '\u{0F44}', '\u{0F51}', '\u{0F53}', '\u{0F56}', '\u{0F58}', ACHUNG, '\u{0F62}',
    '\u{0F63}', '\u{0F66}',
];

fn split_stacks(chars: &[char]) -> Vec<Stack> {
    let mut stacks: Vec<Stack> = Vec::new();
    for &c in chars {
        if let Some(s) = consonant(c) {
            stacks.push(Stack {
                base: Some(c),
                letters: s.to_string(),
                ..Default::default()
            });
            continue;
        }
        if stacks.is_empty() {
            stacks.push(Stack::default());
        }
        let top = stacks.last_mut().expect("non-empty");
        if let Some(s) = subjoined(c) {
            top.letters.push_str(s);
            top.subjoined += 1;
        } else if let Some(v) = vowel(c) {
            top.vowels.push(v);
        } else if let Some(m) = final_mark(c) {
            top.marks.push_str(m);
        }
    }
    stacks
}

/// A bare a-chung carrying a vowel after other letters ("'i", "'o") is a
/// suffix with a case ending, not the root.
fn is_achung_ending(stacks: &[Stack], i: usize) -> bool {
    i > 0 && stacks[i].single() == Some(ACHUNG) && stacks[i].has_vowel()
}

fn find_root(stacks: &[Stack]) -> usize {
    if let Some(i) = (0..stacks.len()).find(|&i| stacks[i].has_vowel() && !is_achung_ending(stacks, i)) {
        return i;
    }
    if let Some(i) = stacks.iter().position(|s| s.subjoined > 0 || s.base.is_none()) {
        return i;
    }
    let letters: Vec<char> = stacks.iter().filter_map(|s| s.base).collect();
    let is_prefix = |c: char| PREFIXES.contains(&c);
    match letters.len() {
        0..=2 => 0,
        3 => {
            let post = POST_SUFFIXES.contains(&letters[2]) && SUFFIXES.contains(&letters[1]);
            if !post && is_prefix(letters[0]) {
                1
            } else {
                0
            }
        }
        _ => usize::from(is_prefix(letters[0])),
    }
}

/// Whether `prefix` followed by `root` could be misread as one stack.
fn needs_dot(prefix: &Stack, root: &Stack) -> bool {
    let Some(p) = prefix.single() else { return false };
    if !PREFIXES.contains(&p) {
        return false;
    }
    let r = root.letters.as_str();
    ["y", "r", "l", "w"].iter().any(|s| r.starts_with(s))
        || (p == '\u{0F51}' && r.starts_with('z'))
        || (p == '\u{0F42}' && r.starts_with('h'))
}

fn syllable(chars: &[char], out: &mut String) {
    let stacks = split_stacks(chars);
    let root = find_root(&stacks);
    for (i, st) in stacks.iter().enumerate() {
        if i == root && i > 0 && needs_dot(&stacks[i - 1], st) {
            out.push('.');
        }
        let bare_a = st.single() == Some(A_CHEN);
        if i == root {
            if st.has_vowel() {
                if !bare_a {
                    out.push_str(&st.letters);
                }
                out.push_str(&st.vowel_text());
            } else {
                if !bare_a {
                    out.push_str(&st.letters);
                }
                out.push('a');
            }
        } else {
            out.push_str(&st.letters);
            out.push_str(&st.vowel_text());
        }
        out.push_str(&st.marks);
    }
}

/// Romanizes Tibetan script; characters outside the Tibetan block pass through.
pub fn wylie_transliterate(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if is_syllable_part(c) {
            let start = i;
            while i < chars.len() && is_syllable_part(chars[i]) {
                i += 1;
            }
            syllable(&chars[start..i], &mut out);
            continue;
        }
        match symbol(c) {
            Some(s) => out.push_str(s),
            None if ('\u{0F00}'..='\u{0FFF}').contains(&c) => {
                out.push_str(&format!("\\u{:04X}", c as u32));
            }
            None => out.push(c),
        }
        i += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn basic_letters_and_words() {
        assert_eq!(wylie_transliterate(""), "");
        assert_eq!(wylie_transliterate("ཀ"), "ka");
        assert_eq!(wylie_transliterate("བོད"), "bod");
    }

    #[test]
    fn root_letter_rules() {
        let cases = [
            ("དག", "dag"),
            ("ལགས", "lags"),
            ("བདག", "bdag"),
            ("དགའ", "dga'"),
            ("དགའི", "dga'i"),
            ("བའི", "ba'i"),
            ("དགངས", "dgangs"),
            ("སྐད", "skad"),
            ("བསྒྲུབས", "bsgrubs"),
            ("རྒྱ", "rgya"),
            ("གཡག", "g.yag"),
            ("ཨོ", "o"),
            ("ཨ", "a"),
            ("མདོ", "mdo"),
            ("ཁམས", "khams"),
            ("\u{0F67}\u{0F71}\u{0F74}\u{0F7E}", "hUM"),
        ];
        for (tib, expect) in cases {
            assert_eq!(wylie_transliterate(tib), expect, "{tib}");
        }
    }

    #[test]
    fn punctuation_and_passthrough() {
        assert_eq!(wylie_transliterate("བོད་སྐད།"), "bod skad/");
        assert_eq!(wylie_transliterate("༡༢༣"), "123");
        assert_eq!(wylie_transliterate("abc ཀ"), "abc ka");
        assert_eq!(wylie_transliterate("\u{0F3E}"), "\\u0F3E");
    }

    proptest! {
        #[test]
        fn pure_tibetan_gives_ascii(s in "[\u{0F00}-\u{0FFF}]{0,30}") {
            prop_assert!(wylie_transliterate(&s).is_ascii());
        }
    }
}
