//! On-disk formats: native packet logs, ground truth and result files,
//! pattern files, classic pcap captures and run manifests.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use etherparse::{IpNumber, Ipv4Header, NetSlice, SlicedPacket};
use pcap_file::pcap::{PcapHeader, PcapPacket, PcapReader, PcapWriter};
use pcap_file::{DataLink, TsResolution};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use votetrace_core::capture::RecordSink;
use votetrace_core::eval::VoteRecord;
use votetrace_core::world::RunStats;
use votetrace_core::{Addr, MatchResult, PacketRecord, Pattern, SimTime};

/// A writer that hashes everything passing through it.
pub struct HashingWriter<W> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> HashingWriter<W> {
    pub fn new(inner: W) -> Self {
        HashingWriter {
            inner,
            hasher: Sha256::new(),
        }
    }

    pub fn finish(mut self) -> io::Result<String> {
        self.inner.flush()?;
        Ok(hex::encode(self.hasher.finalize()))
    }
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    io::copy(&mut f, &mut h)?;
    Ok(hex::encode(h.finalize()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

/// Streams records to a native log as they arrive. The first write error is
/// kept and reported by [`LogWriter::close`].
pub struct LogWriter<W: Write> {
    out: HashingWriter<W>,
    count: u64,
    error: Option<io::Error>,
}

impl<W: Write> LogWriter<W> {
    pub fn new(out: W) -> Self {
        LogWriter {
            out: HashingWriter::new(out),
            count: 0,
            error: None,
        }
    }

    /// Returns the record count and the SHA-256 of the written bytes.
    pub fn close(self) -> io::Result<(u64, String)> {
        if let Some(e) = self.error {
            return Err(e);
        }
        Ok((self.count, self.out.finish()?))
    }
}

impl<W: Write> RecordSink for LogWriter<W> {
    fn record(&mut self, r: PacketRecord) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.out, "{} {} {}", r.time.as_nanos(), r.src, r.dst) {
                self.error = Some(e);
            }
            self.count += 1;
        }
    }
}

pub fn write_log(path: &Path, records: &[PacketRecord]) -> Result<()> {
    let mut w = LogWriter::new(create(path)?);
    for r in records {
        w.record(*r);
    }
    w.close().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn parse_addr(s: &str, line: usize) -> Result<Addr> {
    s.parse().map_err(|_| anyhow!("line {line}: invalid address `{s}`"))
}

/// Reads a native log. Lines must be sorted by `(time, src, dst)`.
pub fn read_log_from(reader: impl BufRead) -> Result<Vec<PacketRecord>> {
    let mut out: Vec<PacketRecord> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut it = line.split(' ');
        let (Some(t), Some(s), Some(d), None) = (it.next(), it.next(), it.next(), it.next()) else {
            bail!("line {n}: expected `time_ns src dst`");
        };
        let time = t.parse::<u64>().map_err(|_| anyhow!("line {n}: invalid time `{t}`"))?;
        let rec = PacketRecord::new(SimTime::from_nanos(time), parse_addr(s, n)?, parse_addr(d, n)?);
        if out.last().is_some_and(|p| *p > rec) {
            bail!("line {n}: records are not sorted by (time, src, dst)");
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_log(path: &Path) -> Result<Vec<PacketRecord>> {
    read_log_from(open(path)?).with_context(|| format!("reading {}", path.display()))
}

/// `client<TAB>time_ns<TAB>box`, one vote per line, sorted by time.
pub fn write_votes(path: &Path, votes: &[VoteRecord]) -> Result<String> {
    let mut sorted = votes.to_vec();
    sorted.sort_by_key(|v| (v.time, v.client, v.ballot_box));
    let mut w = HashingWriter::new(create(path)?);
    for v in &sorted {
        writeln!(w, "{}\t{}\t{}", v.client, v.time.as_nanos(), v.ballot_box)?;
    }
    Ok(w.finish()?)
}

pub fn read_votes(path: &Path) -> Result<Vec<VoteRecord>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let n = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            bail!("{}: line {n}: expected `client<TAB>time_ns<TAB>box`", path.display());
        }
        let time = f[1]
            .parse::<u64>()
            .map_err(|_| anyhow!("{}: line {n}: invalid time `{}`", path.display(), f[1]))?;
        out.push(VoteRecord {
            client: parse_addr(f[0], n)?,
            time: SimTime::from_nanos(time),
            ballot_box: parse_addr(f[2], n)?,
        });
    }
    Ok(out)
}

pub fn results_as_votes(results: &[MatchResult]) -> Vec<VoteRecord> {
    results
        .iter()
        .map(|m| VoteRecord {
            client: m.client,
            time: m.vote_time,
            ballot_box: m.ballot_box,
        })
        .collect()
}

pub fn write_pattern(path: &Path, p: &Pattern) -> Result<()> {
    std::fs::write(path, p.to_string()).with_context(|| format!("writing {}", path.display()))
}

pub fn read_pattern(path: &Path) -> Result<Pattern> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.parse().with_context(|| format!("parsing {}", path.display()))
}

const PCAP_MAGICS: [[u8; 4]; 4] = [
    [0xd4, 0xc3, 0xb2, 0xa1],
    [0xa1, 0xb2, 0xc3, 0xd4],
    [0x4d, 0x3c, 0xb2, 0xa1],
    [0xa1, 0xb2, 0x3c, 0x4d],
];

/// Reads a trace in either format, telling them apart by the pcap magic.
pub fn import_trace(path: &Path) -> Result<Vec<PacketRecord>> {
    let mut head = [0u8; 4];
    let n = File::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .read(&mut head)?;
    if n == 4 && PCAP_MAGICS.contains(&head) {
        read_pcap(path)
    } else {
        read_log(path)
    }
}

/// Extracts `(time, src, dst)` from every IPv4 packet of a classic pcap file.
/// Non-IPv4 packets are skipped. The result is sorted.
pub fn read_pcap(path: &Path) -> Result<Vec<PacketRecord>> {
    let ctx = || format!("reading {}", path.display());
    let mut reader = PcapReader::new(open(path)?).with_context(ctx)?;
    let link = reader.header().datalink;
    let mut out = Vec::new();
    let mut index = 0usize;
    while let Some(pkt) = reader.next_packet() {
        index += 1;
        let pkt = pkt.with_context(|| format!("{}: packet {index}", ctx()))?;
        let sliced = match link {
            DataLink::ETHERNET => SlicedPacket::from_ethernet(&pkt.data),
            DataLink::RAW | DataLink::IPV4 => SlicedPacket::from_ip(&pkt.data),
            DataLink::LINUX_SLL => SlicedPacket::from_linux_sll(&pkt.data),
            other => bail!("{}: unsupported link type {other:?}", ctx()),
        };
        let Ok(sliced) = sliced else { continue };
        if let Some(NetSlice::Ipv4(ip)) = sliced.net {
            let h = ip.header();
            out.push(PacketRecord::new(
                SimTime::from_nanos(pkt.timestamp.as_nanos() as u64),
                Addr::from(h.source()),
                Addr::from(h.destination()),
            ));
        }
    }
    out.sort();
    Ok(out)
}

/// Writes records as bare IPv4 headers in a nanosecond-resolution pcap.
pub fn write_pcap(path: &Path, records: &[PacketRecord]) -> Result<()> {
    let header = PcapHeader {
        datalink: DataLink::RAW,
        ts_resolution: TsResolution::NanoSecond,
        ..Default::default()
    };
    let mut w = PcapWriter::with_header(create(path)?, header)?;
    let mut buf = Vec::with_capacity(Ipv4Header::MIN_LEN);
    for r in records {
        let mut h = Ipv4Header::new(0, 64, IpNumber(253), r.src.octets(), r.dst.octets())?;
        h.header_checksum = h.calc_header_checksum();
        buf.clear();
        h.write(&mut buf)?;
        let ts = Duration::from_nanos(r.time.as_nanos());
        w.write_packet(&PcapPacket::new(ts, buf.len() as u32, &buf))?;
    }
    w.into_writer().flush()?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsFile {
    pub events: u64,
    pub injected: u64,
    pub delivered: u64,
    pub dropped_in_flight: u64,
}

impl From<RunStats> for StatsFile {
    fn from(s: RunStats) -> Self {
        StatsFile {
            events: s.events,
            injected: s.injected,
            delivered: s.delivered,
            dropped_in_flight: s.dropped_in_flight,
        }
    }
}

/// Written beside a log: what produced it and which addresses the observer
/// watched.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub scenario: String,
    pub seed: u64,
    /// SHA-256 over the effective configuration, the seed and the tool version.
    pub config_sha256: String,
    pub log: String,
    pub log_sha256: String,
    pub records: u64,
    pub full_log: bool,
    pub truth: Option<String>,
    pub truth_sha256: Option<String>,
    #[serde(with = "addr_set")]
    pub visible_clients: BTreeSet<Addr>,
    #[serde(with = "addr_set")]
    pub ballot_boxes: BTreeSet<Addr>,
    pub stats: Option<StatsFile>,
}

mod addr_set {
    use std::collections::BTreeSet;

    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};
    use votetrace_core::Addr;

    pub fn serialize<S: Serializer>(set: &BTreeSet<Addr>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(set.iter().map(|a| a.to_string()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeSet<Addr>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| s.parse().map_err(|_| D::Error::custom(format!("invalid address `{s}`"))))
            .collect()
    }
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        serde_json::from_reader(open(path)?).with_context(|| format!("parsing {}", path.display()))
    }
}
