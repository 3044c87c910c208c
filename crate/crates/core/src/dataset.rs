//! Rating logs: loading, k-core filtering, train/test splitting and the
//! low-exposure table used by the simulator.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

pub type UserId = u32;
pub type ItemId = u32;

/// Fraction of malformed lines tolerated by [`load_ratings`].
pub const MAX_MALFORMED_FRACTION: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

impl Interaction {
    pub fn new(user: UserId, item: ItemId, rating: f64) -> Self {
        Interaction {
            user,
            item,
            rating,
            timestamp: None,
        }
    }
}

/// Append-only interaction log with per-user / per-item indices and a single
/// snapshot mark that [`RatingsTable::rollback`] returns to.
#[derive(Debug, Clone)]
pub struct RatingsTable {
    num_users: usize,
    num_items: usize,
    rows: Vec<Interaction>,
    by_user: Vec<Vec<usize>>,
    by_item: Vec<Vec<usize>>,
    pairs: HashMap<(UserId, ItemId), usize>,
    snapshot_mark: usize,
}

impl PartialEq for RatingsTable {
    fn eq(&self, other: &Self) -> bool {
        self.num_users == other.num_users
            && self.num_items == other.num_items
            && self.rows == other.rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableStats {
    pub num_users: usize,
    pub num_items: usize,
    pub num_ratings: usize,
    pub density: f64,
}

impl RatingsTable {
    pub fn new(num_users: usize, num_items: usize) -> Self {
        RatingsTable {
            num_users,
            num_items,
            rows: Vec::new(),
            by_user: vec![Vec::new(); num_users],
            by_item: vec![Vec::new(); num_items],
            pairs: HashMap::new(),
            snapshot_mark: 0,
        }
    }

    /// Build a table from rows whose ids are already dense. Duplicate
    /// `(user, item)` pairs keep the position of the first occurrence and the
    /// values of the last one. The snapshot mark is set to the final length.
    pub fn from_interactions(
        num_users: usize,
        num_items: usize,
        rows: impl IntoIterator<Item = Interaction>,
    ) -> Result<Self> {
        let mut table = RatingsTable::new(num_users, num_items);
        for row in rows {
            table.check(&row)?;
            match table.pairs.get(&(row.user, row.item)) {
                Some(&idx) => table.rows[idx] = row,
                None => table.push_unchecked(row),
            }
        }
        table.snapshot_mark = table.rows.len();
        Ok(table)
    }

    fn check(&self, row: &Interaction) -> Result<()> {
        if row.user as usize >= self.num_users || row.item as usize >= self.num_items {
            return Err(Error::invalid(format!(
                "interaction ({}, {}) outside {}x{} table",
                row.user, row.item, self.num_users, self.num_items
            )));
        }
        if !(1.0..=5.0).contains(&row.rating) {
            return Err(Error::invalid(format!(
                "rating {} outside [1, 5]",
                row.rating
            )));
        }
        Ok(())
    }

    fn push_unchecked(&mut self, row: Interaction) {
        let idx = self.rows.len();
        self.by_user[row.user as usize].push(idx);
        self.by_item[row.item as usize].push(idx);
        self.pairs.insert((row.user, row.item), idx);
        self.rows.push(row);
    }

    /// Append one interaction; returns its row id. Duplicates are rejected.
    pub fn append(&mut self, row: Interaction) -> Result<usize> {
        self.check(&row)?;
        if self.contains(row.user, row.item) {
            return Err(Error::invalid(format!(
                "duplicate interaction ({}, {})",
                row.user, row.item
            )));
        }
        self.push_unchecked(row);
        Ok(self.rows.len() - 1)
    }

    pub fn snapshot(&mut self) {
        self.snapshot_mark = self.rows.len();
    }

    pub fn snapshot_mark(&self) -> usize {
        self.snapshot_mark
    }

    /// Drop every row appended since the last snapshot.
    pub fn rollback(&mut self) {
        while self.rows.len() > self.snapshot_mark {
            let row = self.rows.pop().expect("len > mark");
            self.by_user[row.user as usize].pop();
            self.by_item[row.item as usize].pop();
            self.pairs.remove(&(row.user, row.item));
        }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Interaction] {
        &self.rows
    }

    pub fn row(&self, idx: usize) -> &Interaction {
        &self.rows[idx]
    }

    pub fn user_rows(&self, user: UserId) -> &[usize] {
        &self.by_user[user as usize]
    }

    pub fn item_rows(&self, item: ItemId) -> &[usize] {
        &self.by_item[item as usize]
    }

    pub fn user_degree(&self, user: UserId) -> usize {
        self.by_user[user as usize].len()
    }

    pub fn item_degree(&self, item: ItemId) -> usize {
        self.by_item[item as usize].len()
    }

    pub fn contains(&self, user: UserId, item: ItemId) -> bool {
        self.pairs.contains_key(&(user, item))
    }

    pub fn rating(&self, user: UserId, item: ItemId) -> Option<f64> {
        self.pairs.get(&(user, item)).map(|&i| self.rows[i].rating)
    }

    pub fn user_items(&self, user: UserId) -> impl Iterator<Item = ItemId> + '_ {
        self.by_user[user as usize]
            .iter()
            .map(move |&r| self.rows[r].item)
    }

    pub fn density(&self) -> f64 {
        if self.num_users == 0 || self.num_items == 0 {
            return 0.0;
        }
        self.rows.len() as f64 / (self.num_users as f64 * self.num_items as f64)
    }

    pub fn stats(&self) -> TableStats {
        TableStats {
            num_users: self.num_users,
            num_items: self.num_items,
            num_ratings: self.rows.len(),
            density: self.density(),
        }
    }

    /// New table over the same id space holding the rows `keep` accepts, in
    /// original order.
    pub fn filtered(&self, mut keep: impl FnMut(usize, &Interaction) -> bool) -> RatingsTable {
        let rows = self
            .rows
            .iter()
            .enumerate()
            .filter(|(i, r)| keep(*i, r))
            .map(|(_, r)| *r)
            .collect::<Vec<_>>();
        RatingsTable::from_interactions(self.num_users, self.num_items, rows)
            .expect("rows of a valid table stay valid")
    }
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingFormat {
    /// `user\titem\trating\ttimestamp` (MovieLens 100K `u.data`).
    #[serde(rename = "tab_100k")]
    Tab100k,
    /// `user::item::rating::timestamp` (MovieLens 1M `ratings.dat`).
    #[serde(rename = "doublecolon_1m")]
    DoubleColon1m,
    /// comma or whitespace separated `user,item,rating[,timestamp]`.
    #[serde(rename = "ciao_csv")]
    CiaoCsv,
}

impl FromStr for RatingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tab_100k" => Ok(RatingFormat::Tab100k),
            "doublecolon_1m" => Ok(RatingFormat::DoubleColon1m),
            "ciao_csv" => Ok(RatingFormat::CiaoCsv),
            other => Err(Error::invalid(format!("unknown rating format {other:?}"))),
        }
    }
}

struct RawRow<'a> {
    user: &'a str,
    item: &'a str,
    rating: f64,
    timestamp: Option<i64>,
}

fn parse_line(line: &str, format: RatingFormat) -> Option<RawRow<'_>> {
    let fields: Vec<&str> = match format {
        RatingFormat::Tab100k => line.split('\t').map(str::trim).collect(),
        RatingFormat::DoubleColon1m => line.split("::").map(str::trim).collect(),
        RatingFormat::CiaoCsv => line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect(),
    };
    let strict = !matches!(format, RatingFormat::CiaoCsv);
    if fields.len() < 3 || (strict && fields.len() != 4) {
        return None;
    }
    let (user, item) = (fields[0], fields[1]);
    if user.is_empty() || item.is_empty() {
        return None;
    }
    let rating: f64 = fields[2].parse().ok()?;
    if !(1.0..=5.0).contains(&rating) {
        return None;
    }
    let timestamp = match fields.get(3) {
        Some(t) => match t.parse::<i64>() {
            Ok(v) => Some(v),
            Err(_) if !strict => None,
            Err(_) => return None,
        },
        None => None,
    };
    Some(RawRow {
        user,
        item,
        rating,
        timestamp,
    })
}

/// Dense ids for a set of raw labels: numeric order when every label is an
/// unsigned integer, lexicographic otherwise.
fn densify<'a>(labels: impl Iterator<Item = &'a str>) -> HashMap<&'a str, u32> {
    let distinct: BTreeSet<&str> = labels.collect();
    let mut sorted: Vec<&str> = distinct.into_iter().collect();
    if sorted.iter().all(|l| l.parse::<u64>().is_ok()) {
        sorted.sort_by_key(|l| l.parse::<u64>().unwrap());
    }
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l, i as u32))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadStats {
    pub lines: usize,
    pub malformed: usize,
    pub duplicates: usize,
}

/// Parse a rating log from text. Blank lines are ignored; malformed lines are
/// counted and skipped, and more than 0.1% malformed is a format mismatch.
pub fn parse_ratings(text: &str, format: RatingFormat) -> Result<(RatingsTable, LoadStats)> {
    let mut stats = LoadStats::default();
    let mut parsed = Vec::new();
    let mut first_bad: Option<(usize, String)> = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        stats.lines += 1;
        match parse_line(line, format) {
            Some(r) => parsed.push(r),
            None => {
                stats.malformed += 1;
                first_bad.get_or_insert_with(|| (lineno + 1, line.to_string()));
            }
        }
    }
    if stats.malformed as f64 > MAX_MALFORMED_FRACTION * stats.lines as f64 {
        let (first_line, first_text) = first_bad.unwrap_or_default();
        return Err(Error::FormatMismatch {
            malformed: stats.malformed,
            total: stats.lines,
            first_line,
            first_text,
        });
    }
    if stats.malformed > 0 {
        log::warn!(
            "skipped {} malformed line(s) of {}",
            stats.malformed,
            stats.lines
        );
    }
    if parsed.is_empty() {
        return Err(Error::EmptyResult("no ratings parsed".into()));
    }
    let users = densify(parsed.iter().map(|r| r.user));
    let items = densify(parsed.iter().map(|r| r.item));
    let rows = parsed.iter().map(|r| Interaction {
        user: users[r.user],
        item: items[r.item],
        rating: r.rating,
        timestamp: r.timestamp,
    });
    let table = RatingsTable::from_interactions(users.len(), items.len(), rows)?;
    stats.duplicates = parsed.len() - table.len();
    Ok((table, stats))
}

pub fn load_ratings(path: &Path, format: RatingFormat) -> Result<RatingsTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (table, stats) = parse_ratings(&text, format)?;
    let s = table.stats();
    log::info!(
        "loaded {}: {} users, {} items, {} ratings ({} duplicates merged, {} malformed)",
        path.display(),
        s.num_users,
        s.num_items,
        s.num_ratings,
        stats.duplicates,
        stats.malformed
    );
    Ok(table)
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// Iteratively drop users with fewer than `min_user` ratings and items with
/// fewer than `min_item` until both bounds hold; ids are re-densified in
/// ascending order of the surviving old ids.
pub fn k_core_filter(table: &RatingsTable, min_user: usize, min_item: usize) -> Result<RatingsTable> {
    if min_user == 0 || min_item == 0 {
        return Err(Error::invalid("k-core thresholds must be >= 1"));
    }
    let mut alive = vec![true; table.len()];
    loop {
        let mut udeg = vec![0usize; table.num_users()];
        let mut ideg = vec![0usize; table.num_items()];
        for (r, row) in table.rows().iter().enumerate() {
            if alive[r] {
                udeg[row.user as usize] += 1;
                ideg[row.item as usize] += 1;
            }
        }
        let mut changed = false;
        for (r, row) in table.rows().iter().enumerate() {
            if alive[r] && (udeg[row.user as usize] < min_user || ideg[row.item as usize] < min_item) {
                alive[r] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut user_map = vec![u32::MAX; table.num_users()];
    let mut item_map = vec![u32::MAX; table.num_items()];
    for (r, row) in table.rows().iter().enumerate() {
        if alive[r] {
            user_map[row.user as usize] = 0;
            item_map[row.item as usize] = 0;
        }
    }
    let renumber = |map: &mut [u32]| {
        let mut next = 0u32;
        for slot in map.iter_mut().filter(|s| **s == 0) {
            *slot = next;
            next += 1;
        }
        next as usize
    };
    let num_users = renumber(&mut user_map);
    let num_items = renumber(&mut item_map);
    if num_users == 0 {
        return Err(Error::EmptyResult(format!(
            "k-core filter (min_user={min_user}, min_item={min_item}) removed every rating"
        )));
    }
    let rows = table
        .rows()
        .iter()
        .enumerate()
        .filter(|(r, _)| alive[*r])
        .map(|(_, row)| Interaction {
            user: user_map[row.user as usize],
            item: item_map[row.item as usize],
            ..*row
        });
    let out = RatingsTable::from_interactions(num_users, num_items, rows)?;
    log::info!(
        "k-core ({min_user}, {min_item}): {} users, {} items, {} ratings",
        out.num_users(),
        out.num_items(),
        out.len()
    );
    Ok(out)
}

/// Per-user stratified random split. Each user sends `round(fraction * n)`
/// of their `n` interactions to test, capped so at least one stays in train.
/// Both outputs share the input's id space.
pub fn split_train_test(
    table: &RatingsTable,
    test_fraction: f64,
    seed: u64,
) -> Result<(RatingsTable, RatingsTable)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "test_fraction {test_fraction} not in (0, 1)"
        )));
    }
    let mut rng = rng::seeded(seed);
    let mut in_test = vec![false; table.len()];
    for u in 0..table.num_users() {
        let mut rows = table.user_rows(u as UserId).to_vec();
        let n = rows.len();
        if n < 2 {
            continue;
        }
        rows.shuffle(&mut rng);
        let n_test = ((test_fraction * n as f64).round() as usize).min(n - 1);
        for &r in &rows[..n_test] {
            in_test[r] = true;
        }
    }
    let train = table.filtered(|r, _| !in_test[r]);
    let test = table.filtered(|r, _| in_test[r]);
    Ok((train, test))
}

/// The promoted item set `I_p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromotedSet {
    items: Vec<ItemId>,
    pub retained_fraction: f64,
}

impl PromotedSet {
    pub fn new(mut items: Vec<ItemId>, num_items: usize, retained_fraction: f64) -> Result<Self> {
        items.sort_unstable();
        items.dedup();
        if items.is_empty() {
            return Err(Error::invalid("promoted set is empty"));
        }
        if let Some(&bad) = items.iter().find(|&&i| i as usize >= num_items) {
            return Err(Error::invalid(format!("promoted item {bad} out of range")));
        }
        if !(retained_fraction > 0.0 && retained_fraction <= 1.0) {
            return Err(Error::invalid("retained_fraction must lie in (0, 1]"));
        }
        Ok(PromotedSet {
            items,
            retained_fraction,
        })
    }

    /// Items in ascending id order.
    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, item: ItemId) -> bool {
        self.items.binary_search(&item).is_ok()
    }

    /// Membership mask over the whole catalog.
    pub fn mask(&self, num_items: usize) -> Vec<bool> {
        let mut m = vec![false; num_items];
        for &i in &self.items {
            m[i as usize] = true;
        }
        m
    }
}

/// Pick the `ceil(top_fraction * num_items)` most-rated items (ties by
/// ascending id) and thin each one's interactions down to a uniformly random
/// `round(retained_fraction * count)`. Rows of other items are untouched.
pub fn build_promoted_set(
    table: &RatingsTable,
    top_fraction: f64,
    retained_fraction: f64,
    seed: u64,
) -> Result<(PromotedSet, RatingsTable)> {
    for (name, f) in [("top_fraction", top_fraction), ("retained_fraction", retained_fraction)] {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::invalid(format!("{name} {f} not in (0, 1]")));
        }
    }
    let num_items = table.num_items();
    let n_promoted = ((top_fraction * num_items as f64).ceil() as usize).clamp(1, num_items);
    let mut order: Vec<ItemId> = (0..num_items as ItemId).collect();
    order.sort_by(|a, b| {
        table
            .item_degree(*b)
            .cmp(&table.item_degree(*a))
            .then(a.cmp(b))
    });
    let promoted = PromotedSet::new(order[..n_promoted].to_vec(), num_items, retained_fraction)?;

    let mut rng = rng::seeded(seed);
    let mut drop = vec![false; table.len()];
    for &item in promoted.items() {
        let mut rows = table.item_rows(item).to_vec();
        let keep = (retained_fraction * rows.len() as f64).round() as usize;
        rows.shuffle(&mut rng);
        for &r in &rows[keep.min(rows.len())..] {
            drop[r] = true;
        }
    }
    let thinned = table.filtered(|r, _| !drop[r]);
    Ok((promoted, thinned))
}

// ---------------------------------------------------------------------------
// CSV cache
// ---------------------------------------------------------------------------

/// Reproducibility metadata written above a cached table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub num_users: usize,
    pub num_items: usize,
    pub seed: u64,
    /// Named fractions (test, top, retained ...), in file order.
    pub fractions: Vec<(String, f64)>,
}

pub fn write_table_csv(path: &Path, table: &RatingsTable, header: &CacheHeader) -> Result<()> {
    let mut out = String::with_capacity(table.len() * 24);
    write!(
        out,
        "# num_users={} num_items={} seed={}",
        table.num_users(),
        table.num_items(),
        header.seed
    )
    .unwrap();
    for (k, v) in &header.fractions {
        write!(out, " {k}={v}").unwrap();
    }
    out.push_str("\nuser,item,rating,timestamp\n");
    for r in table.rows() {
        match r.timestamp {
            Some(t) => writeln!(out, "{},{},{},{}", r.user, r.item, r.rating, t),
            None => writeln!(out, "{},{},{},", r.user, r.item, r.rating),
        }
        .unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_table_csv(path: &Path) -> Result<(RatingsTable, CacheHeader)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: msg.to_string(),
    };
    let mut lines = text.lines();
    let meta = lines
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .ok_or_else(|| bad("missing header"))?;
    let mut header = CacheHeader::default();
    for kv in meta.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad("bad header field"))?;
        match k {
            "num_users" => header.num_users = v.parse().map_err(|_| bad("num_users"))?,
            "num_items" => header.num_items = v.parse().map_err(|_| bad("num_items"))?,
            "seed" => header.seed = v.parse().map_err(|_| bad("seed"))?,
            _ => header
                .fractions
                .push((k.to_string(), v.parse().map_err(|_| bad("fraction"))?)),
        }
    }
    if lines.next() != Some("user,item,rating,timestamp") {
        return Err(bad("missing column header"));
    }
    let mut rows = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad("bad row"));
        }
        rows.push(Interaction {
            user: f[0].parse().map_err(|_| bad("user"))?,
            item: f[1].parse().map_err(|_| bad("item"))?,
            rating: f[2].parse().map_err(|_| bad("rating"))?,
            timestamp: if f[3].is_empty() {
                None
            } else {
                Some(f[3].parse().map_err(|_| bad("timestamp"))?)
            },
        });
    }
    let table = RatingsTable::from_interactions(header.num_users, header.num_items, rows)?;
    Ok((table, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy(rows: &[(u32, u32, f64)], nu: usize, ni: usize) -> RatingsTable {
        RatingsTable::from_interactions(nu, ni, rows.iter().map(|&(u, i, r)| Interaction::new(u, i, r)))
            .unwrap()
    }

    #[test]
    fn duplicate_pair_keeps_last_rating() {
        let text = "1\t10\t3\t100\n2\t10\t4\t101\n1\t10\t5\t102\n";
        let (t, stats) = parse_ratings(text, RatingFormat::Tab100k).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(stats.duplicates, 1);
        assert_eq!(t.rating(0, 0), Some(5.0));
        assert_eq!(t.row(0).timestamp, Some(102));
    }

    #[test]
    fn empty_file_is_an_error() {
        let err = parse_ratings("", RatingFormat::Tab100k).unwrap_err();
        assert!(err.to_string().contains("empty result"), "{err}");
    }

    #[test]
    fn too_many_malformed_lines_is_a_mismatch() {
        let text = "1::2::3::4\n1,2,3\n";
        let err = parse_ratings(text, RatingFormat::DoubleColon1m).unwrap_err();
        assert!(matches!(err, Error::FormatMismatch { malformed: 1, total: 2, .. }));
    }

    #[test]
    fn one_malformed_line_in_two_thousand_is_tolerated() {
        let mut text = String::new();
        for u in 0..2000 {
            text.push_str(&format!("{u}::{}::4::0\n", u % 7));
        }
        text.push_str("garbage\n");
        let (t, stats) = parse_ratings(&text, RatingFormat::DoubleColon1m).unwrap();
        assert_eq!(stats.malformed, 1);
        assert_eq!(t.len(), 2000);
    }

    #[test]
    fn ciao_accepts_commas_and_spaces() {
        let text = "7,3,4\n7 5 2\n8,3,1.5\n";
        let (t, _) = parse_ratings(text, RatingFormat::CiaoCsv).unwrap();
        assert_eq!((t.num_users(), t.num_items(), t.len()), (2, 2, 3));
        assert_eq!(t.rating(1, 0), Some(1.5));
    }

    #[test]
    fn numeric_ids_densify_in_numeric_order() {
        let text = "10\t2\t3\t0\n9\t100\t3\t0\n";
        let (t, _) = parse_ratings(text, RatingFormat::Tab100k).unwrap();
        // user "9" < "10" numerically, item "2" < "100".
        assert_eq!(t.row(0).user, 1);
        assert_eq!(t.row(0).item, 0);
        assert_eq!(t.row(1).user, 0);
    }

    #[test]
    fn k_core_identity_at_one() {
        let t = toy(&[(0, 0, 4.0), (1, 1, 3.0), (1, 0, 2.0)], 2, 2);
        assert_eq!(k_core_filter(&t, 1, 1).unwrap(), t);
    }

    #[test]
    fn k_core_star_graph_empties() {
        let t = toy(&[(0, 0, 4.0), (0, 1, 4.0), (0, 2, 4.0), (0, 3, 4.0), (0, 4, 4.0)], 1, 5);
        let err = k_core_filter(&t, 1, 2).unwrap_err();
        assert!(matches!(err, Error::EmptyResult(_)));
    }

    #[test]
    fn k_core_cascades() {
        // item 2 has one rating; dropping it leaves user 2 with one rating.
        let t = toy(
            &[
                (0, 0, 4.0),
                (0, 1, 4.0),
                (1, 0, 4.0),
                (1, 1, 4.0),
                (2, 0, 4.0),
                (2, 2, 4.0),
            ],
            3,
            3,
        );
        let k = k_core_filter(&t, 2, 2).unwrap();
        assert_eq!((k.num_users(), k.num_items(), k.len()), (2, 2, 4));
    }

    #[test]
    fn split_ten_per_user() {
        let rows: Vec<_> = (0..3u32)
            .flat_map(|u| (0..10u32).map(move |i| (u, i, 3.0)))
            .collect();
        let t = toy(&rows, 3, 10);
        let (train, test) = split_train_test(&t, 0.2, 5).unwrap();
        for u in 0..3 {
            assert_eq!(train.user_degree(u), 8);
            assert_eq!(test.user_degree(u), 2);
        }
        let again = split_train_test(&t, 0.2, 5).unwrap();
        assert_eq!(again.0, train);
        assert_eq!(again.1, test);
    }

    #[test]
    fn split_single_interaction_stays_in_train() {
        let t = toy(&[(0, 0, 3.0), (1, 0, 3.0), (1, 1, 3.0)], 2, 2);
        let (train, test) = split_train_test(&t, 0.9, 1).unwrap();
        assert_eq!(train.user_degree(0), 1);
        assert_eq!(test.user_degree(0), 0);
        assert_eq!(train.user_degree(1), 1);
        assert!(split_train_test(&t, 1.0, 1).is_err());
    }

    #[test]
    fn promoted_set_thins_only_promoted_items() {
        // item 0: 200 ratings, items 1..: 1 rating each.
        let mut rows: Vec<_> = (0..200u32).map(|u| (u, 0, 4.0)).collect();
        rows.extend((0..50u32).map(|u| (u, 1 + u, 3.0)));
        let t = toy(&rows, 200, 51);
        let (ip, thin) = build_promoted_set(&t, 0.01, 0.05, 9).unwrap();
        assert_eq!(ip.items(), &[0]);
        assert_eq!(thin.item_degree(0), 10);
        for i in 1..51 {
            assert_eq!(thin.item_degree(i), 1);
        }
        let (_, same) = build_promoted_set(&t, 0.01, 1.0, 9).unwrap();
        assert_eq!(same, t);
    }

    #[test]
    fn csv_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut t = toy(&[(0, 1, 4.5), (1, 0, 2.0)], 2, 3);
        t.append(Interaction { user: 1, item: 2, rating: 3.25, timestamp: Some(77) }).unwrap();
        let header = CacheHeader {
            seed: 7,
            fractions: vec![("test_fraction".into(), 0.2)],
            ..Default::default()
        };
        write_table_csv(&path, &t, &header).unwrap();
        let (back, h) = read_table_csv(&path).unwrap();
        assert_eq!(back, t);
        assert_eq!((h.num_users, h.num_items, h.seed), (2, 3, 7));
        assert_eq!(h.fractions, header.fractions);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Append(u32, u32, u8),
        Snapshot,
        Rollback,
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            6 => (0u32..6, 0u32..8, 1u8..=5).prop_map(|(u, i, r)| Op::Append(u, i, r)),
            1 => Just(Op::Snapshot),
            2 => Just(Op::Rollback),
        ]
    }

    proptest! {
        #[test]
        fn rollback_restores_snapshot_exactly(ops in proptest::collection::vec(op(), 0..60)) {
            let mut t = toy(&[(0, 0, 3.0), (2, 5, 1.0)], 6, 8);
            let mut saved = t.rows().to_vec();
            for op in ops {
                match op {
                    Op::Append(u, i, r) => { let _ = t.append(Interaction::new(u, i, r as f64)); }
                    Op::Snapshot => { t.snapshot(); saved = t.rows().to_vec(); }
                    Op::Rollback => {
                        t.rollback();
                        prop_assert_eq!(t.rows(), &saved[..]);
                    }
                }
                // indices consistent with rows
                for (r, row) in t.rows().iter().enumerate() {
                    prop_assert!(t.user_rows(row.user).contains(&r));
                    prop_assert!(t.item_rows(row.item).contains(&r));
                    prop_assert!(t.contains(row.user, row.item));
                }
                let indexed: usize = (0..6).map(|u| t.user_degree(u)).sum();
                prop_assert_eq!(indexed, t.len());
            }
        }

        #[test]
        fn k_core_bounds_hold(edges in proptest::collection::vec((0u32..12, 0u32..12), 1..120),
                              ku in 1usize..4, ki in 1usize..4) {
            let t = RatingsTable::from_interactions(12, 12,
                edges.iter().map(|&(u, i)| Interaction::new(u, i, 3.0))).unwrap();
            match k_core_filter(&t, ku, ki) {
                Ok(k) => {
                    for u in 0..k.num_users() as u32 { prop_assert!(k.user_degree(u) >= ku); }
                    for i in 0..k.num_items() as u32 { prop_assert!(k.item_degree(i) >= ki); }
                }
                Err(e) => prop_assert!(matches!(e, Error::EmptyResult(_))),
            }
        }
    }
}
