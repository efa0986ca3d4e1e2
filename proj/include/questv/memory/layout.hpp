#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "questv/errors.hpp"
#include "questv/memory/address.hpp"
#include "questv/memory/ept.hpp"

namespace questv::mem {

inline constexpr std::uint64_t KiB = 1024;
inline constexpr std::uint64_t MiB = 1024 * KiB;
inline constexpr std::uint64_t GiB = 1024 * MiB;

struct LayoutSizes {
  std::uint64_t host_bytes = 4 * GiB;
  std::uint64_t bios_bytes = 1 * MiB;
  std::uint64_t kernel_bytes = 64 * MiB;
  std::uint64_t shared_bytes = 4 * MiB;
  std::uint64_t ept_data_bytes = 1 * MiB;

  bool operator==(const LayoutSizes&) const = default;
};

/// Host physical memory map. Sandbox kernels and the shared region are mapped
/// at guest addresses equal to their host addresses, so a guest address names
/// exactly one host location system-wide.
struct MemoryLayout {
  Range bios;
  std::vector<Range> kernels;   // one private region per sandbox
  Range shared;                 // communication region at the top of memory
  std::vector<Range> ept_data;  // monitor-only, mapped into no EPT
  std::uint64_t host_bytes = 0;

  std::size_t sandboxes() const noexcept { return kernels.size(); }
};

struct BuiltLayout {
  MemoryLayout layout;
  std::vector<EptTable> tables;
  std::vector<MonitorToken> tokens;
};

inline MemoryLayout plan_layout(std::size_t n, const LayoutSizes& s) {
  if (n == 0) throw ConfigError("at least one sandbox is required");
  for (std::uint64_t v : {s.host_bytes, s.bios_bytes, s.kernel_bytes, s.shared_bytes, s.ept_data_bytes})
    if (v == 0 || v % kPageSize != 0) throw AlignmentError("layout sizes must be positive multiples of 4KB");

  const unsigned __int128 needed = static_cast<unsigned __int128>(s.bios_bytes) +
                                   static_cast<unsigned __int128>(n) * (s.kernel_bytes + s.ept_data_bytes) +
                                   s.shared_bytes;
  if (needed > s.host_bytes) throw AllocationError("host memory exhausted by layout");

  MemoryLayout l;
  l.host_bytes = s.host_bytes;
  l.bios = Range{0, s.bios_bytes};
  for (std::size_t i = 0; i < n; ++i) l.kernels.push_back(Range{s.bios_bytes + i * s.kernel_bytes, s.kernel_bytes});
  l.shared = Range{s.host_bytes - s.shared_bytes, s.shared_bytes};
  for (std::size_t i = 0; i < n; ++i)
    l.ept_data.push_back(Range{l.shared.begin - (i + 1) * s.ept_data_bytes, s.ept_data_bytes});
  return l;
}

/// Builds the layout and one EPT per sandbox: BIOS read-only everywhere,
/// each kernel region RWX in its own table only, shared region RW everywhere,
/// EPT data regions nowhere.
inline BuiltLayout build_layout(std::size_t n, const LayoutSizes& sizes, std::uint64_t token_seed) {
  BuiltLayout out;
  out.layout = plan_layout(n, sizes);
  const auto& l = out.layout;
  for (std::size_t i = 0; i < n; ++i) {
    const auto sid = static_cast<SandboxId>(i);
    const MonitorToken tok = MonitorToken::issue(token_seed, sid);
    EptTable t(sid, l.host_bytes, tok);
    t.map(Gpa{l.bios.begin}, Hpa{l.bios.begin}, Permissions::r(), l.bios.pages(), tok);
    t.map(Gpa{l.kernels[i].begin}, Hpa{l.kernels[i].begin}, Permissions::rwx(), l.kernels[i].pages(), tok);
    t.map(Gpa{l.shared.begin}, Hpa{l.shared.begin}, Permissions::rw(), l.shared.pages(), tok);
    out.tables.push_back(std::move(t));
    out.tokens.push_back(tok);
  }
  return out;
}

/// Deterministic text report: layout ranges followed by each table's
/// mappings coalesced into runs of equal permissions.
inline std::string dump_layout(const MemoryLayout& l, const std::vector<EptTable>& tables) {
  std::ostringstream os;
  auto hex = [](std::uint64_t v) {
    std::ostringstream h;
    h << "0x" << std::hex << v;
    return h.str();
  };
  os << "host " << hex(l.host_bytes) << "\n";
  os << "bios [" << hex(l.bios.begin) << ", " << hex(l.bios.end()) << ")\n";
  for (std::size_t i = 0; i < l.kernels.size(); ++i)
    os << "kernel " << i << " [" << hex(l.kernels[i].begin) << ", " << hex(l.kernels[i].end()) << ")\n";
  for (std::size_t i = 0; i < l.ept_data.size(); ++i)
    os << "ept-data " << i << " [" << hex(l.ept_data[i].begin) << ", " << hex(l.ept_data[i].end()) << ")\n";
  os << "shared [" << hex(l.shared.begin) << ", " << hex(l.shared.end()) << ")\n";

  for (const auto& t : tables) {
    os << "sandbox " << t.owner() << " mappings:\n";
    bool open = false;
    std::uint64_t run_gpa = 0, run_hpa = 0, run_pages = 0;
    Permissions run_perms;
    auto flush = [&] {
      if (!open) return;
      os << "  gpa [" << hex(run_gpa) << ", " << hex(run_gpa + run_pages * kPageSize) << ") -> hpa " << hex(run_hpa)
         << " " << run_perms.str() << "\n";
    };
    t.for_each_mapping([&](Gpa g, const EptLeaf& leaf) {
      if (open && g.value == run_gpa + run_pages * kPageSize &&
          leaf.frame.value == run_hpa + run_pages * kPageSize && leaf.perms == run_perms) {
        ++run_pages;
        return;
      }
      flush();
      open = true;
      run_gpa = g.value;
      run_hpa = leaf.frame.value;
      run_pages = 1;
      run_perms = leaf.perms;
    });
    flush();
  }
  return os.str();
}

}  // namespace questv::mem
