#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "gramlm/lexicon.hpp"
#include "gramlm/maskplan.hpp"

namespace gramlm {

inline constexpr std::uint16_t kPlanRecordVersion = 1;

// Little-endian record body:
//   version u16, objective u8, T u32, Q u32,
//   context ids u32[T], positions u32[T+Q], query ids u32[Q],
//   n_coarse u32, (slot u32, id u32)[n_coarse],
//   n_fine u32, (row u32, id u32)[n_fine],
//   has_rtd u8, [rtd bitset of ceil(T/8) bytes, LSB first],
//   n_masked u32, (segment u32, coarse u32, fine u32)[n_masked]
// The attention mask is not stored; build_attention_mask rebuilds it.
std::vector<std::uint8_t> serialize_plan(const MaskPlan& plan);
// Throws ParseError (with byte offset) or VersionError; never returns a
// partially parsed plan.
MaskPlan parse_plan(std::span<const std::uint8_t> bytes);

// Plan file: "GRAMPLAN" magic, u32 header length, JSON header bytes, then
// u32-length-prefixed records until end of file.
class PlanWriter {
 public:
  PlanWriter(const std::filesystem::path& path, const std::string& header_json);

  void write(const MaskPlan& plan);
  // Flushes and reports write failures; the destructor closes silently.
  void close();

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

struct PlanFile {
  std::string header_json;
  std::vector<MaskPlan> plans;
};

PlanFile read_plan_file(const std::filesystem::path& path);

// One JSON object per plan, with token surfaces when a vocab is given.
std::string plan_to_json(const MaskPlan& plan, const JointVocab* joint);

}  // namespace gramlm
