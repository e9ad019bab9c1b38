#include "gramlm/plan_io.hpp"

#include <algorithm>
#include <sstream>

#include "json.hpp"

#include "gramlm/error.hpp"

namespace gramlm {

namespace {

constexpr char kPlanMagic[8] = {'G', 'R', 'A', 'M', 'P', 'L', 'A', 'N'};

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) {
    u8(static_cast<std::uint8_t>(v));
    u8(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int shift = 0; shift < 32; shift += 8) u8(static_cast<std::uint8_t>(v >> shift));
  }
  void u32s(std::span<const std::uint32_t> values) {
    for (auto v : values) u32(v);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    const auto v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  // Element count guarded against the remaining bytes before allocating.
  std::size_t count(std::size_t element_bytes) {
    const std::uint32_t n = u32();
    if (static_cast<std::uint64_t>(n) * element_bytes > bytes_.size() - pos_) {
      throw ParseError("record truncated: count " + std::to_string(n) + " exceeds remaining bytes",
                       pos_);
    }
    return n;
  }
  std::vector<std::uint32_t> u32s(std::size_t n) {
    need(n * 4);
    std::vector<std::uint32_t> out(n);
    for (auto& v : out) v = u32();
    return out;
  }
  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (n > bytes_.size() - pos_) throw ParseError("record truncated", pos_);
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_plan(const MaskPlan& plan) {
  const std::size_t t = plan.context_length();
  const std::size_t q = plan.query_count();
  if (plan.positions.size() != t + q) throw ArgumentError("plan positions must cover T + Q");
  if (plan.rtd_labels && plan.rtd_labels->size() != t) {
    throw ArgumentError("rtd labels must cover the T context positions");
  }
  ByteWriter w;
  w.u16(kPlanRecordVersion);
  w.u8(static_cast<std::uint8_t>(plan.objective));
  w.u32(static_cast<std::uint32_t>(t));
  w.u32(static_cast<std::uint32_t>(q));
  w.u32s(plan.context_ids);
  w.u32s(plan.positions);
  w.u32s(plan.query_ids);
  for (const auto* targets : {&plan.coarse, &plan.fine}) {
    w.u32(static_cast<std::uint32_t>(targets->size()));
    for (const Target& target : *targets) {
      w.u32(target.index);
      w.u32(target.id);
    }
  }
  w.u8(plan.rtd_labels ? 1 : 0);
  if (plan.rtd_labels) {
    std::vector<std::uint8_t> bits((t + 7) / 8, 0);
    for (std::size_t i = 0; i < t; ++i) {
      if ((*plan.rtd_labels)[i]) bits[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    }
    for (auto b : bits) w.u8(b);
  }
  w.u32(static_cast<std::uint32_t>(plan.masked.size()));
  for (const MaskedSegment& m : plan.masked) {
    w.u32(m.segment);
    w.u32(m.coarse);
    w.u32(m.fine);
  }
  return w.take();
}

MaskPlan parse_plan(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const std::uint16_t version = r.u16();
  if (version != kPlanRecordVersion) {
    throw VersionError("plan record version " + std::to_string(version) + ", expected " +
                       std::to_string(kPlanRecordVersion));
  }
  MaskPlan plan;
  const std::size_t objective_offset = r.offset();
  const std::uint8_t objective = r.u8();
  if (objective > static_cast<std::uint8_t>(Objective::kRelation)) {
    throw ParseError("unknown objective code " + std::to_string(objective), objective_offset);
  }
  plan.objective = static_cast<Objective>(objective);
  const std::uint32_t t = r.u32();
  const std::uint32_t q = r.u32();
  if ((static_cast<std::uint64_t>(t) * 2 + static_cast<std::uint64_t>(q) * 2) * 4 >
      bytes.size()) {
    throw ParseError("record truncated: layout sizes exceed record", r.offset());
  }
  plan.context_ids = r.u32s(t);
  plan.positions = r.u32s(t + q);
  plan.query_ids = r.u32s(q);
  for (auto* targets : {&plan.coarse, &plan.fine}) {
    const std::size_t n = r.count(8);
    targets->resize(n);
    for (Target& target : *targets) {
      target.index = r.u32();
      target.id = r.u32();
      if (target.index >= t + q) throw ParseError("target index outside layout", r.offset());
    }
  }
  const std::size_t flag_offset = r.offset();
  const std::uint8_t has_rtd = r.u8();
  if (has_rtd > 1) throw ParseError("invalid rtd flag", flag_offset);
  if (has_rtd) {
    std::vector<std::uint8_t> labels(t);
    std::uint8_t byte = 0;
    for (std::uint32_t i = 0; i < t; ++i) {
      if (i % 8 == 0) byte = r.u8();
      labels[i] = (byte >> (i % 8)) & 1;
    }
    plan.rtd_labels = std::move(labels);
  }
  const std::size_t n_masked = r.count(12);
  plan.masked.resize(n_masked);
  for (MaskedSegment& m : plan.masked) {
    m.segment = r.u32();
    m.coarse = r.u32();
    m.fine = r.u32();
  }
  if (!r.done()) throw ParseError("trailing bytes after plan record", r.offset());
  return plan;
}

PlanWriter::PlanWriter(const std::filesystem::path& path, const std::string& header_json)
    : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
  if (!out_) throw IoError("cannot write plan file: " + path.string());
  out_.write(kPlanMagic, sizeof kPlanMagic);
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(header_json.size()));
  const auto len = w.take();
  out_.write(reinterpret_cast<const char*>(len.data()), static_cast<std::streamsize>(len.size()));
  out_.write(header_json.data(), static_cast<std::streamsize>(header_json.size()));
}

void PlanWriter::write(const MaskPlan& plan) {
  const auto body = serialize_plan(plan);
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(body.size()));
  const auto len = w.take();
  out_.write(reinterpret_cast<const char*>(len.data()), static_cast<std::streamsize>(len.size()));
  out_.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
  if (!out_) throw IoError("error while writing plan file: " + path_.string());
}

void PlanWriter::close() {
  out_.close();
  if (!out_) throw IoError("error while closing plan file: " + path_.string());
}

PlanFile read_plan_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read plan file: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string data = std::move(buf).str();
  const std::span<const std::uint8_t> bytes(reinterpret_cast<const std::uint8_t*>(data.data()),
                                            data.size());
  if (bytes.size() < sizeof kPlanMagic ||
      !std::equal(kPlanMagic, kPlanMagic + sizeof kPlanMagic, data.begin())) {
    throw ParseError(path.string() + ": not a plan file", 0);
  }
  PlanFile file;
  std::size_t pos = sizeof kPlanMagic;
  auto read_len = [&] {
    if (bytes.size() - pos < 4) throw ParseError(path.string() + ": truncated length prefix", pos);
    ByteReader r(bytes.subspan(pos, 4));
    const std::uint32_t n = r.u32();
    pos += 4;
    if (n > bytes.size() - pos) throw ParseError(path.string() + ": truncated record", pos);
    return n;
  };
  const std::uint32_t header_len = read_len();
  file.header_json.assign(data, pos, header_len);
  pos += header_len;
  while (pos < bytes.size()) {
    const std::size_t record_start = pos;
    const std::uint32_t n = read_len();
    try {
      file.plans.push_back(parse_plan(bytes.subspan(pos, n)));
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ": record at byte " + std::to_string(record_start) +
                           ": " + e.what(),
                       record_start + 4 + e.offset());
    }
    pos += n;
  }
  return file;
}

std::string plan_to_json(const MaskPlan& plan, const JointVocab* joint) {
  using nlohmann::json;
  auto surface = [&](std::uint32_t id) -> json {
    if (!joint || id >= joint->size()) return nullptr;
    return joint->entry(id).surface;
  };
  auto fine_surface = [&](std::uint32_t id) -> json {
    if (!joint || id >= joint->fine_size()) return nullptr;
    return joint->fine().piece(id);
  };
  json j;
  j["objective"] = objective_name(plan.objective);
  j["context_ids"] = plan.context_ids;
  j["positions"] = plan.positions;
  j["query_ids"] = plan.query_ids;
  if (joint) {
    json ctx = json::array();
    for (auto id : plan.context_ids) ctx.push_back(surface(id));
    j["context"] = ctx;
    json qs = json::array();
    for (auto id : plan.query_ids) qs.push_back(fine_surface(id));
    j["queries"] = qs;
  }
  json coarse = json::array();
  for (const Target& c : plan.coarse) {
    coarse.push_back({{"slot", c.index}, {"id", c.id}, {"surface", surface(c.id)}});
  }
  j["coarse_targets"] = coarse;
  json fine = json::array();
  for (const Target& f : plan.fine) {
    fine.push_back({{"row", f.index}, {"id", f.id}, {"surface", fine_surface(f.id)}});
  }
  j["fine_targets"] = fine;
  j["rtd_labels"] = plan.rtd_labels ? json(*plan.rtd_labels) : json(nullptr);
  json masked = json::array();
  for (const MaskedSegment& m : plan.masked) masked.push_back(m.segment);
  j["masked"] = masked;
  return j.dump();
}

}  // namespace gramlm
