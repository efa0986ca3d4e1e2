#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <variant>

#include "questv/errors.hpp"
#include "questv/memory/address.hpp"

namespace questv::mem {

/// Table indices selected by the bits of a guest physical address.
struct EptIndex {
  unsigned pml4 = 0;  // bits 47:39
  unsigned pdpt = 0;  // bits 38:30
  unsigned pd = 0;    // bits 29:21
  unsigned pt = 0;    // bits 20:12
  std::uint32_t offset = 0;  // bits 11:0

  constexpr bool operator==(const EptIndex&) const = default;
};

inline EptIndex ept_index(Gpa gpa) {
  if (gpa.value >= kGpaLimit) throw RangeError("guest physical address exceeds 48 bits");
  const std::uint64_t v = gpa.value;
  return EptIndex{static_cast<unsigned>((v >> 39) & 0x1FF), static_cast<unsigned>((v >> 30) & 0x1FF),
                  static_cast<unsigned>((v >> 21) & 0x1FF), static_cast<unsigned>((v >> 12) & 0x1FF),
                  static_cast<std::uint32_t>(v & 0xFFF)};
}

/// Capability that authorises mutation of one EptTable. Only monitors hold
/// the genuine token for their sandbox's table.
class MonitorToken {
 public:
  constexpr explicit MonitorToken(std::uint64_t key) : key_(key) {}
  constexpr std::uint64_t key() const { return key_; }
  constexpr bool operator==(const MonitorToken&) const = default;

  /// Deterministic, hard-to-guess key for (seed, sandbox).
  static MonitorToken issue(std::uint64_t seed, SandboxId sandbox) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(sandbox) + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return MonitorToken(z | 1);  // zero is never a valid key
  }

 private:
  std::uint64_t key_;
};

enum class ViolationReason : std::uint8_t { unmapped, permission_denied };

constexpr std::string_view to_string(ViolationReason r) {
  return r == ViolationReason::unmapped ? "unmapped" : "permission-denied";
}

struct EptViolation {
  SandboxId sandbox = 0;
  Gpa gpa;
  AccessKind access = AccessKind::read;
  ViolationReason reason = ViolationReason::unmapped;

  bool operator==(const EptViolation&) const = default;
};

struct EptLeaf {
  Hpa frame;
  Permissions perms;
  bool operator==(const EptLeaf&) const = default;
};

using WalkResult = std::variant<Hpa, EptViolation>;

/// Four-level guest-physical to host-physical table (PML4 -> PDPT -> PD -> PT)
/// with 4KB leaves. Intermediate tables are allocated on first use.
class EptTable {
 public:
  EptTable(SandboxId owner, std::uint64_t host_size, MonitorToken token)
      : owner_(owner), host_size_(host_size), token_(token), root_(std::make_unique<Pml4>()) {}

  SandboxId owner() const noexcept { return owner_; }

  void map(Gpa gpa, Hpa hpa, Permissions perms, std::uint64_t n_pages, const MonitorToken& cap) {
    authorize(cap);
    if (!gpa.page_aligned() || !hpa.page_aligned()) throw AlignmentError("ept_map requires page-aligned addresses");
    if (perms.none()) throw Error("mapping with no permissions is not allowed; unmap instead");
    check_gpa_span(gpa, n_pages);
    if (hpa.value > host_size_ || n_pages > (host_size_ - hpa.value) / kPageSize)
      throw RangeError("host physical range exceeds host memory");
    for (std::uint64_t i = 0; i < n_pages; ++i) {
      auto& slot = leaf_slot(gpa + i * kPageSize, true);
      if (!slot) ++mapped_;
      slot = EptLeaf{hpa + i * kPageSize, perms};
    }
  }

  void unmap(Gpa gpa, std::uint64_t n_pages, const MonitorToken& cap) {
    authorize(cap);
    if (!gpa.page_aligned()) throw AlignmentError("ept_unmap requires a page-aligned address");
    check_gpa_span(gpa, n_pages);
    for (std::uint64_t i = 0; i < n_pages; ++i) {
      if (auto* slot = find_slot(gpa + i * kPageSize); slot && *slot) {
        slot->reset();
        --mapped_;
      }
    }
  }

  void set_perms(Gpa gpa, std::uint64_t n_pages, Permissions perms, const MonitorToken& cap) {
    authorize(cap);
    if (!gpa.page_aligned()) throw AlignmentError("ept_set_perms requires a page-aligned address");
    if (perms.none()) throw Error("use unmap to remove all access");
    check_gpa_span(gpa, n_pages);
    for (std::uint64_t i = 0; i < n_pages; ++i) {
      auto* slot = find_slot(gpa + i * kPageSize);
      if (!slot || !*slot) throw Error("set_perms on unmapped page");
      (*slot)->perms = perms;
    }
  }

  WalkResult walk(Gpa gpa, AccessKind kind) const {
    if (gpa.value >= kGpaLimit) return EptViolation{owner_, gpa, kind, ViolationReason::unmapped};
    const auto leaf = lookup(gpa);
    if (!leaf) return EptViolation{owner_, gpa, kind, ViolationReason::unmapped};
    if (!leaf->perms.allows(kind)) return EptViolation{owner_, gpa, kind, ViolationReason::permission_denied};
    return leaf->frame + (gpa.value & (kPageSize - 1));
  }

  std::optional<EptLeaf> lookup(Gpa gpa) const {
    if (gpa.value >= kGpaLimit) return std::nullopt;
    const auto idx = ept_index(gpa);
    const Pdpt* pdpt = root_->entries[idx.pml4].get();
    if (!pdpt) return std::nullopt;
    const Pd* pd = pdpt->entries[idx.pdpt].get();
    if (!pd) return std::nullopt;
    const Pt* pt = pd->entries[idx.pd].get();
    if (!pt) return std::nullopt;
    return pt->entries[idx.pt];
  }

  /// Visits every leaf in ascending GPA order.
  void for_each_mapping(const std::function<void(Gpa, const EptLeaf&)>& fn) const {
    for (std::uint64_t i4 = 0; i4 < 512; ++i4) {
      const Pdpt* pdpt = root_->entries[i4].get();
      if (!pdpt) continue;
      for (std::uint64_t i3 = 0; i3 < 512; ++i3) {
        const Pd* pd = pdpt->entries[i3].get();
        if (!pd) continue;
        for (std::uint64_t i2 = 0; i2 < 512; ++i2) {
          const Pt* pt = pd->entries[i2].get();
          if (!pt) continue;
          for (std::uint64_t i1 = 0; i1 < 512; ++i1) {
            if (const auto& leaf = pt->entries[i1]) {
              const std::uint64_t gpa = (i4 << 39) | (i3 << 30) | (i2 << 21) | (i1 << 12);
              fn(Gpa{gpa}, *leaf);
            }
          }
        }
      }
    }
  }

  /// Content hash over all leaves; equal tables hash equal.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](std::uint64_t v) {
      h ^= v;
      h *= 1099511628211ULL;
      h ^= h >> 29;
    };
    for_each_mapping([&](Gpa g, const EptLeaf& l) {
      mix(g.value);
      mix(l.frame.value);
      mix(l.perms.bits());
    });
    return h;
  }

  std::uint64_t mapped_pages() const noexcept { return mapped_; }

 private:
  struct Pt {
    std::array<std::optional<EptLeaf>, 512> entries{};
  };
  struct Pd {
    std::array<std::unique_ptr<Pt>, 512> entries{};
  };
  struct Pdpt {
    std::array<std::unique_ptr<Pd>, 512> entries{};
  };
  struct Pml4 {
    std::array<std::unique_ptr<Pdpt>, 512> entries{};
  };

  void authorize(const MonitorToken& cap) const {
    if (cap != token_)
      throw CapabilityError("EPT of sandbox " + std::to_string(owner_) + " may only be changed by its monitor");
  }

  static void check_gpa_span(Gpa gpa, std::uint64_t n_pages) {
    if (gpa.value >= kGpaLimit || n_pages > (kGpaLimit - gpa.value) / kPageSize)
      throw RangeError("guest physical range exceeds 48 bits");
  }

  std::optional<EptLeaf>& leaf_slot(Gpa gpa, bool create) {
    const auto idx = ept_index(gpa);
    auto& pdpt = root_->entries[idx.pml4];
    if (!pdpt && create) pdpt = std::make_unique<Pdpt>();
    auto& pd = pdpt->entries[idx.pdpt];
    if (!pd && create) pd = std::make_unique<Pd>();
    auto& pt = pd->entries[idx.pd];
    if (!pt && create) pt = std::make_unique<Pt>();
    return pt->entries[idx.pt];
  }

  std::optional<EptLeaf>* find_slot(Gpa gpa) {
    const auto idx = ept_index(gpa);
    Pdpt* pdpt = root_->entries[idx.pml4].get();
    if (!pdpt) return nullptr;
    Pd* pd = pdpt->entries[idx.pdpt].get();
    if (!pd) return nullptr;
    Pt* pt = pd->entries[idx.pd].get();
    if (!pt) return nullptr;
    return &pt->entries[idx.pt];
  }

  SandboxId owner_;
  std::uint64_t host_size_;
  MonitorToken token_;
  std::unique_ptr<Pml4> root_;
  std::uint64_t mapped_ = 0;
};

}  // namespace questv::mem
