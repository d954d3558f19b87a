use std::fmt;

/// `(row, col)`, zero-based from the top-left corner.
pub type Pos = (usize, usize);

pub const ACTIONS: [&str; 4] = ["Up", "Down", "Left", "Right"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn name(self) -> &'static str {
        ACTIONS[self.index()]
    }

    pub fn index(self) -> usize {
        match self {
            Direction::Up => 0,
            Direction::Down => 1,
            Direction::Left => 2,
            Direction::Right => 3,
        }
    }

    pub fn from_name(name: &str) -> Option<Direction> {
        Direction::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(name.trim()))
    }

    /// The neighbouring cell, or `None` when it would leave a `rows × cols` board.
    pub fn apply(self, (r, c): Pos, rows: usize, cols: usize) -> Option<Pos> {
        match self {
            Direction::Up if r > 0 => Some((r - 1, c)),
            Direction::Down if r + 1 < rows => Some((r + 1, c)),
            Direction::Left if c > 0 => Some((r, c - 1)),
            Direction::Right if c + 1 < cols => Some((r, c + 1)),
            _ => None,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A symbol grid recovered from observation text: the contiguous run of
/// lines made only of single-character, space-separated codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridView {
    pub cells: Vec<Vec<char>>,
}

impl GridView {
    pub fn rows(&self) -> usize {
        self.cells.len()
    }

    pub fn cols(&self) -> usize {
        self.cells.first().map_or(0, Vec::len)
    }

    pub fn at(&self, (r, c): Pos) -> Option<char> {
        self.cells.get(r).and_then(|row| row.get(c)).copied()
    }

    /// First cell holding any of `symbols`, scanning row-major.
    pub fn find(&self, symbols: &[char]) -> Option<Pos> {
        self.cells.iter().enumerate().find_map(|(r, row)| {
            row.iter()
                .position(|ch| symbols.contains(ch))
                .map(|c| (r, c))
        })
    }
}

pub fn parse_grid(text: &str) -> Option<GridView> {
    let mut cells: Vec<Vec<char>> = Vec::new();
    for line in text.lines() {
        let row: Option<Vec<char>> = line
            .split_whitespace()
            .map(|tok| {
                let mut chars = tok.chars();
                match (chars.next(), chars.next()) {
                    (Some(ch), None) if ch.is_ascii_alphabetic() => Some(ch),
                    _ => None,
                }
            })
            .collect();
        match row {
            Some(row) if !row.is_empty() && (cells.is_empty() || row.len() == cells[0].len()) => {
                cells.push(row)
            }
            _ if !cells.is_empty() => break,
            _ => {}
        }
    }
    (!cells.is_empty()).then_some(GridView { cells })
}
