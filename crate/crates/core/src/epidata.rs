//! Loaders for public count tables and territory graphs, and the long-format
//! writer used for every matrix output.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Days, NaiveDate};
use ndarray::{Array2, ArrayView2, Axis};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::CountMatrix;
use crate::operators::EpiGraph;

/// Warnings and bookkeeping from a load, written next to the outputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LoadReport {
    pub source: String,
    pub format: String,
    pub territories: usize,
    pub days: usize,
    /// Input rows summed into a region that already had a row.
    pub aggregated_rows: usize,
    /// Cells absent from the input and set to zero.
    pub filled_cells: usize,
    /// Negative daily counts (kept as is).
    pub negative_counts: usize,
    pub dropped_territories: Vec<String>,
    pub warnings: Vec<String>,
}

impl LoadReport {
    fn finish(&mut self, z: &CountMatrix) {
        self.territories = z.num_territories();
        self.days = z.num_days();
        self.negative_counts = z.values().iter().filter(|v| **v < 0.0).count();
        if self.negative_counts > 0 {
            self.warnings.push(format!("{} negative daily counts kept", self.negative_counts));
        }
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.position() {
        Some(pos) => Error::format(path, pos.line() as usize, e.to_string()),
        None => Error::Csv(e),
    }
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::io(path, e))
}

/// Daily counts from cumulative counts; the first day keeps its cumulative
/// value.
pub fn cumulative_to_daily(cumulative: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut daily = cumulative.to_owned();
    for mut row in daily.outer_iter_mut() {
        for t in (1..row.len()).rev() {
            row[t] -= row[t - 1];
        }
    }
    daily
}

/// Running sums along each row; inverse of [`cumulative_to_daily`].
pub fn daily_to_cumulative(daily: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = daily.to_owned();
    out.accumulate_axis_inplace(Axis(1), |&prev, cur| *cur += prev);
    out
}

fn parse_us_date(text: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(text.trim(), "%m/%d/%y").ok()
}

fn date_range(first: NaiveDate, last: NaiveDate) -> Vec<NaiveDate> {
    first.iter_days().take_while(|d| *d <= last).collect()
}

/// Cumulative counts in the wide layout of the JHU CSSE time series: leading
/// metadata columns, then one `m/d/yy` column per day. Rows are summed per
/// region (the column whose header mentions "country", else the first
/// column) and differenced into daily counts. Territories are sorted by
/// name. Days missing between two date columns carry the previous
/// cumulative value, i.e. a daily count of zero.
pub fn load_cumulative_wide(path: &Path) -> Result<(CountMatrix, LoadReport)> {
    read_cumulative_wide(open(path)?, path)
}

pub fn read_cumulative_wide<R: Read>(reader: R, path: &Path) -> Result<(CountMatrix, LoadReport)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| csv_error(path, e))?,
        None => return Err(Error::format(path, 1, "empty file")),
    };
    let first_date = header
        .iter()
        .position(|h| parse_us_date(h).is_some())
        .ok_or_else(|| Error::format(path, 1, "no m/d/yy date column in the header"))?;
    if first_date == 0 {
        return Err(Error::format(path, 1, "expected metadata columns before the dates"));
    }
    let mut dates = Vec::new();
    for h in header.iter().skip(first_date) {
        let date = parse_us_date(h).ok_or_else(|| Error::format(path, 1, format!("unparseable date column {h:?}")))?;
        if dates.last().is_some_and(|last| *last >= date) {
            return Err(Error::format(path, 1, format!("dates are not increasing at {h:?}")));
        }
        dates.push(date);
    }
    let region_col =
        header.iter().take(first_date).position(|h| h.to_ascii_lowercase().contains("country")).unwrap_or(0);

    let mut report = LoadReport { source: path.display().to_string(), format: "wide".into(), ..Default::default() };
    let mut sums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for record in records {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let region = record.get(region_col).unwrap_or("").to_string();
        if region.is_empty() {
            return Err(Error::format(path, line, "empty region name"));
        }
        let mut values = Vec::with_capacity(dates.len());
        for field in record.iter().skip(first_date) {
            let v: f64 = field
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::format(path, line, format!("bad cumulative count {field:?}")))?;
            values.push(v);
        }
        match sums.get_mut(&region) {
            Some(acc) => {
                report.aggregated_rows += 1;
                acc.iter_mut().zip(&values).for_each(|(a, v)| *a += v);
            }
            None => {
                sums.insert(region, values);
            }
        }
    }
    if sums.is_empty() {
        return Err(Error::format(path, 2, "no data rows"));
    }

    let all_dates = date_range(dates[0], *dates.last().expect("non-empty"));
    let position: HashMap<NaiveDate, usize> = dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let mut cumulative = Array2::zeros((sums.len(), all_dates.len()));
    for (mut row, values) in cumulative.outer_iter_mut().zip(sums.values()) {
        let mut last = 0.0;
        for (t, day) in all_dates.iter().enumerate() {
            if let Some(&i) = position.get(day) {
                last = values[i];
            }
            row[t] = last;
        }
    }
    let missing_days = all_dates.len() - dates.len();
    if missing_days > 0 {
        report.filled_cells = missing_days * sums.len();
        report.warnings.push(format!("{missing_days} days missing from the header; daily counts set to 0"));
    }
    let z = CountMatrix::new(cumulative_to_daily(cumulative.view()), sums.into_keys().collect(), all_dates)?;
    report.finish(&z);
    Ok((z, report))
}

/// Daily counts in long format with header `territory,date,count` and ISO
/// dates. Territories are sorted by name, so row order in the file does not
/// matter. Cells missing inside the overall date range are set to zero and
/// reported.
pub fn load_daily_long(path: &Path) -> Result<(CountMatrix, LoadReport)> {
    read_daily_long(open(path)?, path)
}

pub fn read_daily_long<R: Read>(reader: R, path: &Path) -> Result<(CountMatrix, LoadReport)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let names: Vec<String> = header.iter().map(|h| h.to_ascii_lowercase()).collect();
    if names != ["territory", "date", "count"] {
        return Err(Error::format(
            path,
            1,
            format!("expected header territory,date,count, got {:?}", header.as_slice()),
        ));
    }
    let mut cells: HashMap<(String, NaiveDate), (f64, usize)> = HashMap::new();
    let mut territories = BTreeSet::new();
    let (mut first, mut last): (Option<NaiveDate>, Option<NaiveDate>) = (None, None);
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let territory = record[0].to_string();
        if territory.is_empty() {
            return Err(Error::format(path, line, "empty territory"));
        }
        let date = NaiveDate::parse_from_str(&record[1], "%Y-%m-%d")
            .map_err(|_| Error::format(path, line, format!("bad date {:?}", &record[1])))?;
        let value: f64 = record[2]
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| Error::format(path, line, format!("bad count {:?}", &record[2])))?;
        if let Some((_, prev)) = cells.insert((territory.clone(), date), (value, line)) {
            return Err(Error::format(
                path,
                line,
                format!("duplicate entry for {territory} on {date} (first on line {prev})"),
            ));
        }
        territories.insert(territory);
        first = Some(first.map_or(date, |f| f.min(date)));
        last = Some(last.map_or(date, |l| l.max(date)));
    }
    let (Some(first), Some(last)) = (first, last) else {
        return Err(Error::format(path, 2, "no data rows"));
    };
    let dates = date_range(first, last);
    let territories: Vec<String> = territories.into_iter().collect();
    let mut report = LoadReport { source: path.display().to_string(), format: "long".into(), ..Default::default() };
    let mut values = Array2::zeros((territories.len(), dates.len()));
    for (d, name) in territories.iter().enumerate() {
        for (t, date) in dates.iter().enumerate() {
            match cells.get(&(name.clone(), *date)) {
                Some(&(v, _)) => values[[d, t]] = v,
                None => {
                    report.filled_cells += 1;
                    if report.filled_cells <= 20 {
                        report.warnings.push(format!("missing {name} on {date}, set to 0"));
                    }
                }
            }
        }
    }
    if report.filled_cells > 20 {
        report.warnings.push(format!("{} missing cells in total", report.filled_cells));
    }
    let z = CountMatrix::new(values, territories, dates)?;
    report.finish(&z);
    Ok((z, report))
}

/// Long-format table `territory,date,<value_column>`, one row per cell,
/// territories in row order and dates ascending. Values use the shortest
/// representation that parses back to the same float.
pub fn write_long<W: Write>(
    out: W,
    territories: &[String],
    dates: &[NaiveDate],
    values: ArrayView2<'_, f64>,
    value_column: &str,
) -> Result<()> {
    if values.dim() != (territories.len(), dates.len()) {
        return Err(Error::Shape(format!(
            "{:?} values for {} territories and {} dates",
            values.dim(),
            territories.len(),
            dates.len()
        )));
    }
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["territory", "date", value_column])?;
    for (d, name) in territories.iter().enumerate() {
        for (t, date) in dates.iter().enumerate() {
            wtr.write_record([name.as_str(), &date.to_string(), &values[[d, t]].to_string()])?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<output>", e))?;
    Ok(())
}

/// Counts in the format read by [`load_daily_long`].
pub fn write_counts<W: Write>(out: W, z: &CountMatrix) -> Result<()> {
    write_long(out, z.territories(), z.dates(), z.values(), "count")
}

/// Write a matrix shaped like `like` to `path` with header
/// `territory,date,value`.
pub fn write_values(path: &Path, like: &CountMatrix, values: ArrayView2<'_, f64>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_long(std::io::BufWriter::new(file), like.territories(), like.dates(), values, "value")
}

/// Graph edge list:
///
/// ```text
/// D=3
/// territories=north,centre,south   # optional, one name per vertex
/// 1,2
/// 2,3
/// ```
///
/// Vertices are 1-based. Blank lines and `#` comments are ignored.
pub fn load_graph(path: &Path) -> Result<EpiGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_graph(&text, path)
}

pub fn parse_graph(text: &str, path: &Path) -> Result<EpiGraph> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .peekable();
    let (line, header) = lines.next().ok_or_else(|| Error::format(path, 1, "missing header D=<int>"))?;
    let vertices: usize = header
        .strip_prefix("D=")
        .or_else(|| header.strip_prefix("D ="))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::format(path, line, format!("expected header D=<int>, got {header:?}")))?;
    let mut names = None;
    if let Some(&(line, text)) = lines.peek() {
        if let Some(list) = text.strip_prefix("territories=") {
            let list: Vec<String> = list.split(',').map(|s| s.trim().to_string()).collect();
            if list.len() != vertices || list.iter().any(String::is_empty) {
                return Err(Error::format(path, line, format!("expected {vertices} territory names")));
            }
            if list.iter().collect::<HashSet<_>>().len() != list.len() {
                return Err(Error::format(path, line, "duplicate territory names"));
            }
            names = Some(list);
            lines.next();
        }
    }
    let mut seen = HashMap::new();
    let mut edges = Vec::new();
    for (line, text) in lines {
        let parse = |s: &str| s.trim().parse::<usize>().ok();
        let (a, b) = text
            .split_once(',')
            .and_then(|(a, b)| Some((parse(a)?, parse(b)?)))
            .ok_or_else(|| Error::format(path, line, format!("expected d1,d2, got {text:?}")))?;
        if a == 0 || b == 0 || a > vertices || b > vertices {
            return Err(Error::format(path, line, format!("vertex outside 1..={vertices}")));
        }
        if a == b {
            return Err(Error::format(path, line, format!("self-loop on vertex {a}")));
        }
        let key = (a.min(b), a.max(b));
        if let Some(first) = seen.insert(key, line) {
            return Err(Error::format(
                path,
                line,
                format!("duplicate edge {},{} (first on line {first})", key.0, key.1),
            ));
        }
        edges.push((a - 1, b - 1));
    }
    let graph = EpiGraph::new(vertices, edges)?;
    match names {
        Some(names) => graph.with_territories(names),
        None => Ok(graph),
    }
}

/// Counts and graph restricted to the territories they share.
#[derive(Debug, Clone)]
pub struct Alignment {
    pub counts: CountMatrix,
    pub graph: EpiGraph,
    /// Territories in the data but not in the graph.
    pub dropped: Vec<String>,
    /// Graph vertices without data.
    pub unmatched_vertices: Vec<String>,
}

/// Match data rows to graph vertices. A graph with territory names is the
/// authority on which territories are estimated jointly: other data rows
/// are dropped. An unnamed graph must have one vertex per data row.
pub fn align_to_graph(z: &CountMatrix, graph: &EpiGraph) -> Result<Alignment> {
    let Some(names) = graph.territories() else {
        if graph.num_vertices() != z.num_territories() {
            return Err(Error::Graph(format!(
                "graph has {} vertices but the data has {} territories",
                graph.num_vertices(),
                z.num_territories()
            )));
        }
        return Ok(Alignment {
            counts: z.clone(),
            graph: graph.clone(),
            dropped: Vec::new(),
            unmatched_vertices: Vec::new(),
        });
    };
    let vertex: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut keep_rows = Vec::new();
    let mut keep_vertices = Vec::new();
    let mut dropped = Vec::new();
    for (d, name) in z.territories().iter().enumerate() {
        match vertex.get(name.as_str()) {
            Some(&v) => {
                keep_rows.push(d);
                keep_vertices.push(v);
            }
            None => dropped.push(name.clone()),
        }
    }
    if keep_rows.is_empty() {
        return Err(Error::Graph("no territory of the data appears in the graph".into()));
    }
    let present: HashSet<usize> = keep_vertices.iter().copied().collect();
    let unmatched_vertices = (0..names.len()).filter(|v| !present.contains(v)).map(|v| names[v].clone()).collect();
    Ok(Alignment {
        counts: z.select_territories(&keep_rows)?,
        graph: graph.subgraph(&keep_vertices)?,
        dropped,
        unmatched_vertices,
    })
}

/// Consecutive dates starting at `start`.
pub fn dates_from(start: NaiveDate, days: usize) -> Vec<NaiveDate> {
    (0..days as u64).map(|k| start + Days::new(k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn p() -> &'static Path {
        Path::new("test.csv")
    }

    #[test]
    fn differencing_examples() {
        assert_eq!(cumulative_to_daily(array![[0.0, 3.0, 3.0, 10.0]].view()), array![[0.0, 3.0, 0.0, 7.0]]);
        assert_eq!(cumulative_to_daily(array![[5.0, 4.0]].view()), array![[5.0, -1.0]]);
        let c = array![[1.0, 4.0, 4.0, 9.0], [0.0, 0.0, 2.0, 1.0]];
        assert_eq!(daily_to_cumulative(cumulative_to_daily(c.view()).view()), c);
    }

    const WIDE: &str = "\
Province/State,Country/Region,Lat,Long,1/22/20,1/23/20,1/24/20
North,Alpha,1.0,2.0,1,3,6
South,Alpha,1.0,2.0,0,2,2
,Beta,0,0,5,4,9
";

    #[test]
    fn wide_loader_sums_subregions_then_differences() {
        let (z, report) = read_cumulative_wide(WIDE.as_bytes(), p()).unwrap();
        assert_eq!(z.territories(), &["Alpha", "Beta"]);
        assert_eq!(z.values(), array![[1.0, 4.0, 3.0], [5.0, -1.0, 5.0]]);
        assert_eq!(z.dates()[0], NaiveDate::from_ymd_opt(2020, 1, 22).unwrap());
        assert_eq!(report.aggregated_rows, 1);
        assert_eq!(report.negative_counts, 1);
    }

    #[test]
    fn wide_loader_fills_missing_days_with_zero_counts() {
        let text = "Country,1/1/21,1/3/21\nA,2,5\n";
        let (z, report) = read_cumulative_wide(text.as_bytes(), p()).unwrap();
        assert_eq!(z.values(), array![[2.0, 0.0, 3.0]]);
        assert_eq!(report.filled_cells, 1);
    }

    #[test]
    fn wide_loader_errors_carry_line_numbers() {
        let cases = [
            ("Country,Lat\nA,1\n", 1),
            ("Country,1/2/20,1/1/20\nA,1,2\n", 1),
            ("Country,1/1/20,1/2/20\nA,1,x\n", 2),
            ("Country,1/1/20,1/2/20\nA,1,2\nB,1\n", 3),
        ];
        for (text, line) in cases {
            match read_cumulative_wide(text.as_bytes(), p()) {
                Err(Error::Format { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    const LONG: &str = "\
territory,date,count
a,2020-03-01,1
a,2020-03-02,2
a,2020-03-03,3
b,2020-03-01,4
b,2020-03-02,5
b,2020-03-03,6
";

    #[test]
    fn long_loader_pivots() {
        let (z, report) = read_daily_long(LONG.as_bytes(), p()).unwrap();
        assert_eq!(z.values(), array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(z.territories(), &["a", "b"]);
        assert_eq!(report.filled_cells, 0);
    }

    #[test]
    fn long_loader_fills_and_reports_missing_cells() {
        let text: String = LONG.lines().filter(|l| !l.starts_with("b,2020-03-02")).map(|l| format!("{l}\n")).collect();
        let (z, report) = read_daily_long(text.as_bytes(), p()).unwrap();
        assert_eq!(z.values()[[1, 1]], 0.0);
        assert_eq!(report.filled_cells, 1);
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn long_loader_ignores_row_order() {
        let mut rows: Vec<&str> = LONG.lines().skip(1).collect();
        rows.reverse();
        rows.swap(0, 3);
        let text = format!("territory,date,count\n{}\n", rows.join("\n"));
        assert_eq!(read_daily_long(text.as_bytes(), p()).unwrap().0, read_daily_long(LONG.as_bytes(), p()).unwrap().0);
    }

    #[test]
    fn long_loader_rejects_duplicates_and_bad_headers() {
        let dup = format!("{LONG}a,2020-03-02,9\n");
        match read_daily_long(dup.as_bytes(), p()) {
            Err(Error::Format { line, message, .. }) => {
                assert_eq!(line, 8);
                assert!(message.contains("line 3"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_daily_long("t,d,c\n".as_bytes(), p()), Err(Error::Format { line: 1, .. })));
        assert!(matches!(
            read_daily_long("territory,date,count\na,03/01/2020,1\n".as_bytes(), p()),
            Err(Error::Format { line: 2, .. })
        ));
    }

    #[test]
    fn long_round_trip_is_exact() {
        let v = array![[0.1, 1e-300, -3.0], [12345.678901234567, f64::MIN_POSITIVE, 2.0 / 3.0]];
        let z = CountMatrix::from_values(v).unwrap();
        let mut buf = Vec::new();
        write_counts(&mut buf, &z).unwrap();
        let (back, _) = read_daily_long(buf.as_slice(), p()).unwrap();
        assert_eq!(back, z);
    }

    #[test]
    fn graph_parsing() {
        let g = parse_graph("# comment\nD=3\n1,2\n3,2\n", p()).unwrap();
        assert_eq!(g.num_vertices(), 3);
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
        let g = parse_graph("D=4\n", p()).unwrap();
        assert_eq!(g.num_edges(), 0);
        let g = parse_graph("D=2\nterritories=x,y\n1,2\n", p()).unwrap();
        assert_eq!(g.territories().unwrap(), &["x", "y"]);
        let cases = [
            ("1,2\n", 1),
            ("D=9\n7,7\n", 2),
            ("D=3\n1,2\n\n2,1\n", 4),
            ("D=3\n1,4\n", 2),
            ("D=3\n1;2\n", 2),
            ("D=3\nterritories=a,b\n", 2),
        ];
        for (text, line) in cases {
            match parse_graph(text, p()) {
                Err(Error::Format { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
        match parse_graph("D=9\n7,7\n", p()) {
            Err(e) => assert!(e.to_string().contains("self-loop"), "{e}"),
            Ok(_) => unreachable!(),
        }
    }

    #[test]
    fn alignment_drops_unmatched_territories() {
        let z = CountMatrix::new(
            Array2::from_shape_fn((3, 4), |(d, t)| (d * 10 + t) as f64),
            vec!["a".into(), "b".into(), "c".into()],
            dates_from(NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), 4),
        )
        .unwrap();
        let g = parse_graph("D=3\nterritories=c,a,x\n1,2\n2,3\n", p()).unwrap();
        let al = align_to_graph(&z, &g).unwrap();
        assert_eq!(al.counts.territories(), &["a", "c"]);
        assert_eq!(al.dropped, vec!["b"]);
        assert_eq!(al.unmatched_vertices, vec!["x"]);
        assert_eq!(al.graph.num_edges(), 1);
        assert_eq!(al.graph.territories().unwrap(), &["a", "c"]);
        assert!(align_to_graph(&z, &EpiGraph::empty(2)).is_err());
        assert_eq!(align_to_graph(&z, &EpiGraph::empty(3)).unwrap().counts, z);
    }
}
