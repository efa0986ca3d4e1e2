#pragma once

#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "questv/errors.hpp"
#include "questv/memory/ept.hpp"
#include "questv/memory/host_memory.hpp"

namespace questv::mem {

/// Performs a guest access through `table`. For writes `buffer` is the
/// source, otherwise the destination. The access is all-or-nothing: if any
/// covered page fails translation no byte moves and one violation per failing
/// page is returned.
inline std::vector<EptViolation> guest_access(const EptTable& table, HostMemory& host, Gpa gpa, AccessKind kind,
                                              std::span<std::uint8_t> buffer) {
  if (buffer.empty()) throw RangeError("guest access length must be at least one byte");

  struct Piece {
    Hpa hpa;
    std::size_t offset;
    std::size_t len;
  };
  std::vector<Piece> pieces;
  std::vector<EptViolation> violations;

  std::uint64_t addr = gpa.value;
  std::size_t done = 0;
  while (done < buffer.size()) {
    const std::size_t n = std::min<std::uint64_t>(kPageSize - (addr % kPageSize), buffer.size() - done);
    auto res = table.walk(Gpa{addr}, kind);
    if (auto* hpa = std::get_if<Hpa>(&res))
      pieces.push_back(Piece{*hpa, done, n});
    else
      violations.push_back(std::get<EptViolation>(res));
    done += n;
    addr += n;
  }
  if (!violations.empty()) return violations;

  for (const auto& p : pieces) {
    if (kind == AccessKind::write)
      host.write(p.hpa, buffer.subspan(p.offset, p.len));
    else
      host.read(p.hpa, buffer.subspan(p.offset, p.len));
  }
  return {};
}

}  // namespace questv::mem
