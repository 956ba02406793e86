use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassInfo {
    pub name: String,
    pub color: [u8; 3],
}

/// Ordered class list; a class's index is its position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    classes: Vec<ClassInfo>,
}

impl Palette {
    pub fn new(classes: Vec<ClassInfo>) -> Result<Self> {
        let mut p = Palette { classes: Vec::new() };
        for c in classes {
            p.push(c.name, c.color)?;
        }
        Ok(p)
    }

    /// Water, tree canopy, low vegetation, impervious.
    pub fn land_cover() -> Self {
        Palette {
            classes: vec![
                ClassInfo {
                    name: "water".into(),
                    color: [0, 0, 255],
                },
                ClassInfo {
                    name: "tree-canopy".into(),
                    color: [0, 128, 0],
                },
                ClassInfo {
                    name: "low-vegetation".into(),
                    color: [128, 255, 128],
                },
                ClassInfo {
                    name: "impervious".into(),
                    color: [128, 96, 96],
                },
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    /// Append a class, returning its index.
    pub fn push(&mut self, name: impl Into<String>, color: [u8; 3]) -> Result<usize> {
        let name = name.into();
        if name.trim().is_empty() || name.contains(['\n', ',', '=']) {
            return Err(Error::Palette(format!("invalid class name `{name}`")));
        }
        if self.index_of(&name).is_some() {
            return Err(Error::Palette(format!(
                "class `{name}` already exists; classes are: {}",
                self.names().join(", ")
            )));
        }
        self.classes.push(ClassInfo { name, color });
        Ok(self.classes.len() - 1)
    }

    pub fn names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn check_class(&self, class: usize) -> Result<()> {
        if class < self.classes.len() {
            Ok(())
        } else {
            let listed: Vec<String> = self
                .classes
                .iter()
                .enumerate()
                .map(|(i, c)| format!("{i}={}", c.name))
                .collect();
            Err(Error::Palette(format!(
                "unknown class {class}; valid classes are {}",
                listed.join(", ")
            )))
        }
    }
}

pub fn color_hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

pub fn parse_color_hex(s: &str) -> Result<[u8; 3]> {
    let hex = s.strip_prefix('#').unwrap_or(s);
    if hex.len() != 6 || !hex.is_ascii() {
        return Err(Error::Palette(format!("color `{s}` is not #rrggbb")));
    }
    let chan = |i: usize| {
        u8::from_str_radix(&hex[i..i + 2], 16).map_err(|_| Error::Palette(format!("color `{s}` is not #rrggbb")))
    };
    Ok([chan(0)?, chan(2)?, chan(4)?])
}
