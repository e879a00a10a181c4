//! Block-granular KV-cache accounting for one engine.
//!
//! Blocks are allocated lazily as a request's context grows, but a request
//! is only admitted once its full footprint (prompt plus requested output)
//! is covered by free or evictable blocks net of every earlier admission's
//! outstanding growth. Running requests therefore never stall on memory.
//! Finished requests leave their blocks behind as a per-session prefix that
//! a later turn of the same session can reuse; those prefixes are evicted
//! least-recently-used first.

use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq)]
struct PrefixEntry {
    tokens: u32,
    blocks: u32,
    last_used: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct RequestBlocks {
    allocated: u32,
    committed: u32,
}

#[derive(Debug, Clone)]
pub struct KvCache {
    kv_blocks: u32,
    block_size: u32,
    used_blocks: u32,
    requests: BTreeMap<u64, RequestBlocks>,
    prefixes: BTreeMap<u64, PrefixEntry>,
    clock: u64,
    evictions: u64,
}

impl KvCache {
    pub fn new(kv_blocks: u32, block_size: u32) -> Self {
        KvCache {
            kv_blocks,
            block_size: block_size.max(1),
            used_blocks: 0,
            requests: BTreeMap::new(),
            prefixes: BTreeMap::new(),
            clock: 0,
            evictions: 0,
        }
    }

    pub fn kv_blocks(&self) -> u32 {
        self.kv_blocks
    }

    pub fn block_size(&self) -> u32 {
        self.block_size
    }

    pub fn used_blocks(&self) -> u32 {
        self.used_blocks
    }

    pub fn free_blocks(&self) -> u32 {
        self.kv_blocks - self.used_blocks
    }

    /// Blocks held by cached session prefixes (reclaimable on demand).
    pub fn evictable_blocks(&self) -> u32 {
        self.prefixes.values().map(|p| p.blocks).sum()
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    pub fn blocks_for(&self, tokens: u32) -> u32 {
        tokens.div_ceil(self.block_size)
    }

    pub fn request_blocks(&self, request_id: u64) -> u32 {
        self.requests.get(&request_id).map_or(0, |r| r.allocated)
    }

    pub fn is_committed(&self, request_id: u64) -> bool {
        self.requests.get(&request_id).is_some_and(|r| r.committed > 0)
    }

    pub fn cached_prefix(&self, session_id: u64) -> Option<u32> {
        self.prefixes.get(&session_id).map(|p| p.tokens)
    }

    /// Growth still owed to admitted requests.
    fn outstanding(&self) -> u32 {
        self.requests
            .values()
            .map(|r| r.committed.saturating_sub(r.allocated))
            .sum()
    }

    /// Blocks a new admission could claim right now.
    pub fn admissible_blocks(&self) -> u32 {
        (self.free_blocks() + self.evictable_blocks()).saturating_sub(self.outstanding())
    }

    /// Hands a session's cached prefix to `request_id`, crediting at most
    /// `max_tokens` of it. Surplus blocks are freed. The kept blocks leave the
    /// reclaimable pool, so the claim is capped by admissible headroom.
    pub fn claim_prefix(&mut self, session_id: u64, request_id: u64, max_tokens: u32) -> u32 {
        let headroom = self.admissible_blocks();
        let Some(entry) = self.prefixes.remove(&session_id) else {
            return 0;
        };
        let keep = self
            .blocks_for(entry.tokens.min(max_tokens))
            .min(entry.blocks)
            .min(headroom);
        let credit = entry.tokens.min(max_tokens).min(keep * self.block_size);
        self.used_blocks -= entry.blocks - keep;
        let slot = self.requests.entry(request_id).or_insert(RequestBlocks {
            allocated: 0,
            committed: 0,
        });
        slot.allocated += keep;
        credit
    }

    /// Reserves the footprint for a request's whole lifetime. Returns false
    /// (and reserves nothing) when memory cannot cover it.
    pub fn commit(&mut self, request_id: u64, footprint_tokens: u32) -> bool {
        let want = self.blocks_for(footprint_tokens);
        let held = self.request_blocks(request_id);
        let extra = want.saturating_sub(held);
        if extra > self.admissible_blocks() {
            return false;
        }
        let slot = self.requests.entry(request_id).or_insert(RequestBlocks {
            allocated: 0,
            committed: 0,
        });
        slot.committed = want.max(slot.allocated);
        true
    }

    /// Grows a request's allocation to cover `total_tokens`, evicting cached
    /// prefixes when needed. Fails only if the request is uncommitted or the
    /// commitment was exceeded.
    pub fn grow(&mut self, request_id: u64, total_tokens: u32) -> Result<(), String> {
        let want = self.blocks_for(total_tokens);
        let current = *self
            .requests
            .get(&request_id)
            .ok_or_else(|| format!("request {request_id} holds no KV commitment"))?;
        if want <= current.allocated {
            return Ok(());
        }
        if want > current.committed.max(current.allocated) {
            return Err(format!(
                "request {request_id} needs {want} blocks beyond its commitment of {}",
                current.committed
            ));
        }
        let need = want - current.allocated;
        while self.free_blocks() < need {
            if !self.evict_one() {
                return Err(format!("KV exhausted growing request {request_id}"));
            }
        }
        self.used_blocks += need;
        self.requests.get_mut(&request_id).expect("present").allocated = want;
        Ok(())
    }

    fn evict_one(&mut self) -> bool {
        let victim = self
            .prefixes
            .iter()
            .min_by_key(|(session, p)| (p.last_used, **session))
            .map(|(session, _)| *session);
        match victim {
            Some(session) => {
                let entry = self.prefixes.remove(&session).expect("present");
                self.used_blocks -= entry.blocks;
                self.evictions += 1;
                true
            }
            None => false,
        }
    }

    /// Moves a finished request's blocks into the session prefix index.
    pub fn release_to_prefix(&mut self, request_id: u64, session_id: u64, tokens: u32) {
        let Some(slot) = self.requests.remove(&request_id) else {
            return;
        };
        if let Some(old) = self.prefixes.remove(&session_id) {
            self.used_blocks -= old.blocks;
        }
        self.clock += 1;
        if slot.allocated > 0 {
            self.prefixes.insert(
                session_id,
                PrefixEntry {
                    tokens: tokens.min(slot.allocated * self.block_size),
                    blocks: slot.allocated,
                    last_used: self.clock,
                },
            );
        }
    }

    /// Drops a request's blocks and commitment outright.
    pub fn release(&mut self, request_id: u64) {
        if let Some(slot) = self.requests.remove(&request_id) {
            self.used_blocks -= slot.allocated;
        }
    }

    /// Block conservation and per-request accounting.
    pub fn check(&self) -> Result<(), String> {
        let held: u32 = self.requests.values().map(|r| r.allocated).sum();
        let cached = self.evictable_blocks();
        if held + cached != self.used_blocks {
            return Err(format!(
                "KV accounting drift: requests {held} + prefixes {cached} != used {}",
                self.used_blocks
            ));
        }
        if self.used_blocks > self.kv_blocks {
            return Err(format!("KV overcommitted: {} > {}", self.used_blocks, self.kv_blocks));
        }
        Ok(())
    }
}
