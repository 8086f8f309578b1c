use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::MatchError;

pub const DEFAULT_PROMPT_TEMPLATE: &str = "a photo of a {keyword}";
const VERSION_PREFIX: &str = "# version:";

/// Version tag of [`default_category_spec`].
pub const DEFAULT_DICTIONARY_VERSION: &str = "landscape-reconstruction-1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DictionaryEntry {
    pub category: String,
    pub keyword: String,
    pub prompt: String,
}

/// Ordered text anchors. The entry order defines the axis order of every
/// [`SemanticProfile`](super::SemanticProfile) built against it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dictionary {
    pub entries: Vec<DictionaryEntry>,
    pub version: String,
}

/// Prompt rendering: `{keyword}` is substituted, with optional per-category
/// templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub default: String,
    pub per_category: BTreeMap<String, String>,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            default: DEFAULT_PROMPT_TEMPLATE.to_owned(),
            per_category: BTreeMap::new(),
        }
    }
}

impl PromptTemplate {
    pub fn render(&self, category: &str, keyword: &str) -> String {
        self.per_category
            .get(category)
            .unwrap_or(&self.default)
            .replace("{keyword}", keyword)
    }
}

/// Builds a dictionary ordered by category, then keyword.
pub fn build_dictionary(
    category_spec: &BTreeMap<String, Vec<String>>,
    template: &PromptTemplate,
    version: &str,
) -> Result<Dictionary, MatchError> {
    let mut entries = Vec::new();
    for (category, keywords) in category_spec {
        let mut sorted: Vec<&String> = keywords.iter().collect();
        sorted.sort();
        for pair in sorted.windows(2) {
            if pair[0] == pair[1] {
                return Err(MatchError::DuplicateEntry {
                    category: category.clone(),
                    keyword: pair[0].clone(),
                });
            }
        }
        for keyword in sorted {
            let prompt = template.render(category, keyword);
            if prompt.trim().is_empty() {
                return Err(MatchError::DictionaryFormat {
                    line: 0,
                    reason: format!("empty prompt for {category}/{keyword}"),
                });
            }
            entries.push(DictionaryEntry {
                category: category.clone(),
                keyword: keyword.clone(),
                prompt,
            });
        }
    }
    if entries.is_empty() {
        return Err(MatchError::DictionaryEmpty);
    }
    Ok(Dictionary {
        entries,
        version: version.to_owned(),
    })
}

/// Nature-weighted landscape vocabulary. The published work does not list
/// its dictionary, so this is a reconstruction: mountains and water
/// dominate, with water split by terrain.
pub fn default_category_spec() -> BTreeMap<String, Vec<String>> {
    let spec: &[(&str, &[&str])] = &[
        ("mountain", &["cliff", "hill", "mountain peak", "mountain range", "rock", "ridge", "valley"]),
        ("water", &["lake", "pond", "river", "sea", "stream", "waterfall"]),
        ("vegetation", &["bamboo", "forest", "pine tree", "willow tree"]),
        ("sky", &["cloud", "fog", "mist", "moon"]),
        ("structure", &["boat", "bridge", "hut", "pavilion", "temple", "village"]),
    ];
    spec.iter()
        .map(|(c, ks)| (c.to_string(), ks.iter().map(|k| k.to_string()).collect()))
        .collect()
}

pub fn default_dictionary() -> Dictionary {
    build_dictionary(
        &default_category_spec(),
        &PromptTemplate::default(),
        DEFAULT_DICTIONARY_VERSION,
    )
    .expect("built-in dictionary is valid")
}

impl Dictionary {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `# version: <v>` followed by `category<TAB>keyword<TAB>prompt` lines.
    pub fn to_text(&self) -> String {
        let mut out = format!("{VERSION_PREFIX} {}\n", self.version);
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}\t{}", e.category, e.keyword, e.prompt);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, MatchError> {
        let mut version = None;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if let Some(v) = line.strip_prefix(VERSION_PREFIX) {
                version = Some(v.trim().to_owned());
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [category, keyword, prompt] = fields[..] else {
                return Err(MatchError::DictionaryFormat {
                    line: lineno,
                    reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            };
            if prompt.trim().is_empty() {
                return Err(MatchError::DictionaryFormat {
                    line: lineno,
                    reason: "empty prompt".to_owned(),
                });
            }
            if !seen.insert((category.to_owned(), keyword.to_owned())) {
                return Err(MatchError::DuplicateEntry {
                    category: category.to_owned(),
                    keyword: keyword.to_owned(),
                });
            }
            entries.push(DictionaryEntry {
                category: category.to_owned(),
                keyword: keyword.to_owned(),
                prompt: prompt.to_owned(),
            });
        }
        let version = version.ok_or(MatchError::DictionaryFormat {
            line: 1,
            reason: "missing `# version:` header".to_owned(),
        })?;
        if entries.is_empty() {
            return Err(MatchError::DictionaryEmpty);
        }
        Ok(Self { entries, version })
    }

    pub fn load(path: &Path) -> Result<Self, MatchError> {
        let text = fs::read_to_string(path).map_err(|e| MatchError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), MatchError> {
        fs::write(path, self.to_text()).map_err(|e| MatchError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}
