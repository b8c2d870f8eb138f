//! Page-table placement analysis over snapshot dumps: per-level node counts,
//! pointer-locality matrices and remote leaf fractions per observer.

use std::fmt::Write as _;

use crate::dump::{DumpNode, SnapshotDump};
use crate::machine::SocketId;

/// Which tree(s) of a dump to analyze.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    /// The tree walked by threads on this socket.
    Replica(SocketId),
    /// Every replica; each socket column shows the tree its own threads walk.
    Merged,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Cell {
    pub node_count: u64,
    /// Valid entries in these nodes, by target socket.
    pub targets: Vec<u64>,
}

impl Cell {
    pub fn valid(&self) -> u64 {
        self.targets.iter().sum()
    }

    /// Fraction of valid entries whose target is not on `home`.
    pub fn remote_fraction(&self, home: SocketId) -> f64 {
        let valid = self.valid();
        if valid == 0 {
            0.0
        } else {
            (valid - self.targets[home]) as f64 / valid as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelDistribution {
    socket_count: usize,
    /// Indexed by `4 - level`, then by socket.
    cells: Vec<Vec<Cell>>,
}

impl LevelDistribution {
    pub fn socket_count(&self) -> usize {
        self.socket_count
    }

    pub fn cell(&self, level: u8, socket: SocketId) -> &Cell {
        &self.cells[(4 - level) as usize][socket]
    }

    pub fn nodes_at_level(&self, level: u8) -> u64 {
        self.cells[(4 - level) as usize].iter().map(|c| c.node_count).sum()
    }
}

/// Nodes belonging to the tree `observer` walks.
fn observer_tree(dump: &SnapshotDump, observer: SocketId) -> impl Iterator<Item = &DumpNode> {
    let replica = dump.replica_for(observer);
    dump.nodes.iter().filter(move |n| Some(n.replica_socket) == replica)
}

pub fn level_distribution(dump: &SnapshotDump, view: View) -> LevelDistribution {
    let n = dump.socket_count();
    let mut cells = vec![
        vec![
            Cell {
                node_count: 0,
                targets: vec![0; n],
            };
            n
        ];
        4
    ];
    let mut add = |node: &DumpNode| {
        let cell = &mut cells[(4 - node.level) as usize][node.socket];
        cell.node_count += 1;
        for e in &node.entries {
            cell.targets[e.socket] += 1;
        }
    };
    match view {
        View::Replica(s) => observer_tree(dump, s).for_each(&mut add),
        // Every replica is the tree of the socket it is named after, and
        // sockets without one walk the primary, so this is all nodes.
        View::Merged => dump.nodes.iter().for_each(&mut add),
    }
    LevelDistribution {
        socket_count: n,
        cells,
    }
}

/// Fraction of leaf entries in `observer`'s tree that sit on a node away
/// from `observer`, i.e. the share of walks whose last access is remote.
pub fn remote_leaf_view(dump: &SnapshotDump, observer: SocketId) -> f64 {
    let (mut total, mut remote) = (0u64, 0u64);
    for node in observer_tree(dump, observer) {
        let leaves = node.leaf_entries().count() as u64;
        total += leaves;
        if node.socket != observer {
            remote += leaves;
        }
    }
    if total == 0 {
        0.0
    } else {
        remote as f64 / total as f64
    }
}

/// Leaf entries in `observer`'s tree by the socket of the data they map.
pub fn leaf_data_sockets(dump: &SnapshotDump, observer: SocketId) -> Vec<u64> {
    let mut out = vec![0; dump.socket_count()];
    for node in observer_tree(dump, observer) {
        for e in node.leaf_entries() {
            out[e.socket] += 1;
        }
    }
    out
}

fn humanize(n: u64) -> String {
    if n < 1000 {
        n.to_string()
    } else if n < 999_500 {
        format!("{}k", (n as f64 / 1e3).round() as u64)
    } else if n < 999_500_000 {
        format!("{}M", (n as f64 / 1e6).round() as u64)
    } else {
        format!("{}G", (n as f64 / 1e9).round() as u64)
    }
}

fn pct(fraction: f64) -> u64 {
    (fraction * 100.0).round() as u64
}

/// One matrix cell, e.g. `  1 [ 56  66  40  37] (72%)`.
pub fn render_cell(cell: &Cell, home: SocketId) -> String {
    let targets: Vec<String> = cell.targets.iter().map(|&t| format!("{:>3}", humanize(t))).collect();
    format!(
        "{:>3} [{}] ({:>2}%)",
        humanize(cell.node_count),
        targets.join(" "),
        pct(cell.remote_fraction(home))
    )
}

/// Fixed-width table with rows L4..L1 and one block per socket.
pub fn render_matrix(dist: &LevelDistribution) -> String {
    let n = dist.socket_count;
    let width = render_cell(&Cell { node_count: 0, targets: vec![0; n] }, 0).len();
    let mut out = format!("{:^7}|", "Level");
    let headers: Vec<String> = (0..n).map(|s| format!(" {:^width$} ", format!("Socket {s}"))).collect();
    out.push_str(headers.join("|").trim_end());
    out.push('\n');
    for level in (1..=4).rev() {
        let _ = write!(out, "{:^7}|", format!("L{level}"));
        let cells: Vec<String> = (0..n).map(|s| format!(" {} ", render_cell(dist.cell(level, s), s))).collect();
        out.push_str(cells.join("|").trim_end());
        out.push('\n');
    }
    out
}

/// CSV with columns level,socket,node_count,t0..tN-1,remote_pct.
pub fn render_csv(dist: &LevelDistribution) -> String {
    let n = dist.socket_count;
    let mut out = String::from("level,socket,node_count");
    for s in 0..n {
        let _ = write!(out, ",t{s}");
    }
    out.push_str(",remote_pct\n");
    for level in (1..=4).rev() {
        for s in 0..n {
            let cell = dist.cell(level, s);
            let _ = write!(out, "{level},{s},{}", cell.node_count);
            for t in &cell.targets {
                let _ = write!(out, ",{t}");
            }
            let _ = writeln!(out, ",{:.2}", cell.remote_fraction(s) * 100.0);
        }
    }
    out
}
