"""Proof-of-stake state machine: accounts, transactions, blocks, economics.

The ledger is a synchronous-round, single-proposer chain without forks:
consensus attacks are out of scope, which keeps the verdict economics
(escrow, slashing, quorum settlement) exactly testable. All token
arithmetic is integer-only, with fractional parameters held as exact
rationals, so conservation is an assertable identity rather than a
tolerance. Blocks serialize to a documented big-endian binary layout;
every digest is SHA-256 of canonical bytes, and replaying a persisted
chain from its genesis snapshot reproduces each state root bit for bit.

Settlement happens inside apply_transaction the moment attestations for
a TDM reach the stake quorum on an identical (verdict, report hash)
pair: verified tracks return their escrow and collect task fees,
rejected tracks burn their escrow, unresolved tracks join the UCT pool
and spawn internal follow-up tasks, and pool tracks that associate get
mined into the catalog for a minted reward.
"""

import copy
import dataclasses
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from .astro import (
    DecayError,
    Epoch,
    GroundSite,
    J2_EARTH,
    KeplerianElements,
    OrbitRecord,
    propagate_j2,
    state_to_kepler,
)
from .errors import SdaError
from .fedprop import ModelProposal, ResidualModel, merge_model
from .iod import IodSolution
from .tasking import (
    INTERNAL_TASK_FEE,
    IodRegion,
    Task,
    is_expired,
    read_task,
    region_from_solution,
    task_identity,
    write_task,
)
from .tdm import TdmError, parse_tdm, serialize_tdm
from .validation import (
    ValidationParams,
    ValidationReport,
    associate_uct,
    mine_object,
    read_report,
    validate_tdm,
)
from .wire import (
    Reader,
    WireError,
    Writer,
    ZERO_DIGEST,
    append_chain_log,
    read_chain_log,
    sha256,
    write_chain_log,
)

ROLES = ("observer", "compute", "requester")

TX_KINDS = ("genesis", "submit_tdm", "post_task", "register_stake",
            "attest_validation", "propose_model", "vote_model",
            "claim_reward")

STATE_MAGIC = b"SDASTATE"


class LedgerError(SdaError):
    """Raised for structural ledger failures (bad genesis, bad round)."""


class TxRejected(LedgerError):
    """A transaction that cannot apply; the state is left untouched."""


def _check_fraction(name: str, v) -> Fraction:
    # floats are refused: 0.1 is not 1/10 in binary, and token math must
    # be exact
    if isinstance(v, float):
        raise LedgerError(f"{name} must be an int or Fraction, not float")
    return Fraction(v)


@dataclass(frozen=True)
class EconomicsParams:
    """Genesis-configured token economics."""

    observer_stake_min: int = 10
    slash_fraction: Fraction = Fraction(1)
    validator_fee_cut: Fraction = Fraction(1, 10)
    r_mint: int = 50
    r_model: int = 20
    block_subsidy: int = 1
    attestation_quorum: Fraction = Fraction(2, 3)

    def __post_init__(self):
        for name in ("observer_stake_min", "r_mint", "r_model",
                     "block_subsidy"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                raise LedgerError(f"{name} must be a nonnegative integer")
        object.__setattr__(self, "slash_fraction",
                           _check_fraction("slash_fraction", self.slash_fraction))
        object.__setattr__(self, "validator_fee_cut",
                           _check_fraction("validator_fee_cut",
                                           self.validator_fee_cut))
        object.__setattr__(self, "attestation_quorum",
                           _check_fraction("attestation_quorum",
                                           self.attestation_quorum))
        if not 0 <= self.slash_fraction <= 1:
            raise LedgerError("slash_fraction must lie in [0, 1]")
        if not 0 <= self.validator_fee_cut <= 1:
            raise LedgerError("validator_fee_cut must lie in [0, 1]")
        if not Fraction(1, 2) < self.attestation_quorum <= 1:
            raise LedgerError("attestation_quorum must lie in (1/2, 1]")

    def canonical_bytes(self) -> bytes:
        w = Writer().u64(self.observer_stake_min)
        for f in (self.slash_fraction, self.validator_fee_cut,
                  self.attestation_quorum):
            w.u64(f.numerator).u64(f.denominator)
        w.u64(self.r_mint).u64(self.r_model).u64(self.block_subsidy)
        return w.bytes()


@dataclass
class Account:
    account_id: str
    balance: int = 0
    staked: int = 0
    roles: set = field(default_factory=set)

    def __post_init__(self):
        if not self.account_id:
            raise LedgerError("account_id must be nonempty")
        if not isinstance(self.balance, int) or self.balance < 0:
            raise LedgerError("balance must be a nonnegative integer")
        if not isinstance(self.staked, int) or self.staked < 0:
            raise LedgerError("staked must be a nonnegative integer")
        bad = set(self.roles) - set(ROLES)
        if bad:
            raise LedgerError(f"unknown roles {sorted(bad)}")
        self.roles = set(self.roles)


# -- transaction payloads ---------------------------------------------------

@dataclass(frozen=True)
class GenesisPayload:
    snapshot: bytes     # canonical state encoding


@dataclass(frozen=True)
class SubmitTdm:
    tdm_text: str
    task_id: bytes = b""    # empty for unsolicited submissions


@dataclass(frozen=True)
class PostTask:
    target: object          # object_id str | IodRegion
    fee: int
    urgency: bool = False
    origin: str = "external"


@dataclass(frozen=True)
class RegisterStake:
    amount: int
    role: str


@dataclass(frozen=True)
class AttestValidation:
    report: ValidationReport


@dataclass(frozen=True)
class ProposeModel:
    proposal: ModelProposal


@dataclass(frozen=True)
class VoteModel:
    proposal_hash: bytes
    vote: str               # accept | reject


@dataclass(frozen=True)
class ClaimReward:
    task_id: bytes


_PAYLOAD_TYPES = {
    "genesis": GenesisPayload,
    "submit_tdm": SubmitTdm,
    "post_task": PostTask,
    "register_stake": RegisterStake,
    "attest_validation": AttestValidation,
    "propose_model": ProposeModel,
    "vote_model": VoteModel,
    "claim_reward": ClaimReward,
}


@dataclass(frozen=True)
class Transaction:
    kind: str
    sender: str
    nonce: int
    payload: object

    def __post_init__(self):
        if self.kind not in TX_KINDS:
            raise LedgerError(f"unknown tx kind {self.kind!r}")
        if not isinstance(self.payload, _PAYLOAD_TYPES[self.kind]):
            raise LedgerError(f"payload type mismatch for {self.kind}")
        if not isinstance(self.nonce, int) or self.nonce < 0:
            raise LedgerError("nonce must be a nonnegative integer")


def _write_region(w: Writer, region: IodRegion) -> None:
    el = region.elements
    for v in (el.a, el.e, el.i, el.raan, el.argp, el.M, el.epoch.t,
              region.tol_a, region.tol_e, region.tol_i, region.tol_raan):
        w.f64(v)


def _read_region(r: Reader) -> IodRegion:
    v = [r.f64() for _ in range(11)]
    el = KeplerianElements(a=v[0], e=v[1], i=v[2], raan=v[3], argp=v[4],
                           M=v[5], epoch=Epoch(v[6]))
    return IodRegion(elements=el, tol_a=v[7], tol_e=v[8], tol_i=v[9],
                     tol_raan=v[10])


def _write_target(w: Writer, target) -> None:
    if isinstance(target, str):
        w.u8(0).string(target)
    else:
        w.u8(1)
        _write_region(w, target)


def _read_target(r: Reader):
    tag = r.u8()
    if tag == 0:
        return r.string()
    if tag == 1:
        return _read_region(r)
    raise WireError(f"unknown target tag {tag}")


def write_transaction(w: Writer, tx: Transaction) -> None:
    w.u8(TX_KINDS.index(tx.kind)).string(tx.sender).u64(tx.nonce)
    p = tx.payload
    if tx.kind == "genesis":
        w.blob(p.snapshot)
    elif tx.kind == "submit_tdm":
        w.string(p.tdm_text).blob(p.task_id)
    elif tx.kind == "post_task":
        _write_target(w, p.target)
        w.u64(p.fee).u8(1 if p.urgency else 0).string(p.origin)
    elif tx.kind == "register_stake":
        w.u64(p.amount).string(p.role)
    elif tx.kind == "attest_validation":
        w.blob(p.report.canonical_bytes())
    elif tx.kind == "propose_model":
        w.blob(p.proposal.canonical_bytes())
    elif tx.kind == "vote_model":
        w.digest(p.proposal_hash).string(p.vote)
    else:   # claim_reward
        w.digest(p.task_id)


def _read_proposal(raw: bytes) -> ModelProposal:
    r = Reader(raw)
    proposer = r.string()
    claimed = r.f64()
    parent = r.u64()
    W = tuple(tuple(r.f64() for _ in range(6)) for _ in range(3))
    r.done()
    return ModelProposal(W_new=W, proposer=proposer, claimed_rms=claimed,
                         parent_version=parent)


def read_transaction(r: Reader) -> Transaction:
    tag = r.u8()
    if tag >= len(TX_KINDS):
        raise WireError(f"unknown tx kind tag {tag}")
    kind = TX_KINDS[tag]
    sender = r.string()
    nonce = r.u64()
    if kind == "genesis":
        payload = GenesisPayload(snapshot=r.blob())
    elif kind == "submit_tdm":
        payload = SubmitTdm(tdm_text=r.string(), task_id=r.blob())
    elif kind == "post_task":
        target = _read_target(r)
        payload = PostTask(target=target, fee=r.u64(), urgency=r.u8() != 0,
                           origin=r.string())
    elif kind == "register_stake":
        payload = RegisterStake(amount=r.u64(), role=r.string())
    elif kind == "attest_validation":
        sub = Reader(r.blob())
        payload = AttestValidation(report=read_report(sub))
    elif kind == "propose_model":
        payload = ProposeModel(proposal=_read_proposal(r.blob()))
    elif kind == "vote_model":
        payload = VoteModel(proposal_hash=r.digest(), vote=r.string())
    else:
        payload = ClaimReward(task_id=r.digest())
    return Transaction(kind=kind, sender=sender, nonce=nonce, payload=payload)


def transaction_bytes(tx: Transaction) -> bytes:
    w = Writer()
    write_transaction(w, tx)
    return w.bytes()


def tx_hash(tx: Transaction) -> bytes:
    return sha256(transaction_bytes(tx))


# -- blocks -----------------------------------------------------------------

@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    tx_root: bytes
    state_root: bytes
    proposer: str
    time: float
    txs: tuple

    def __post_init__(self):
        if self.height < 0:
            raise LedgerError("height must be nonnegative")
        for name in ("prev_hash", "tx_root", "state_root"):
            if len(getattr(self, name)) != 32:
                raise LedgerError(f"{name} must be a 32-byte digest")


def compute_tx_root(txs) -> bytes:
    w = Writer().u32(len(txs))
    for tx in txs:
        w.blob(transaction_bytes(tx))
    return sha256(w.bytes())


def write_block(w: Writer, b: Block) -> None:
    w.u64(b.height).digest(b.prev_hash).digest(b.tx_root)
    w.digest(b.state_root).string(b.proposer).f64(b.time)
    w.u32(len(b.txs))
    for tx in b.txs:
        w.blob(transaction_bytes(tx))


def read_block(r: Reader) -> Block:
    height = r.u64()
    prev_hash = r.digest()
    tx_root = r.digest()
    state_root = r.digest()
    proposer = r.string()
    time = r.f64()
    txs = []
    for _ in range(r.u32()):
        sub = Reader(r.blob())
        txs.append(read_transaction(sub))
        sub.done()
    return Block(height=height, prev_hash=prev_hash, tx_root=tx_root,
                 state_root=state_root, proposer=proposer, time=time,
                 txs=tuple(txs))


def block_bytes(b: Block) -> bytes:
    w = Writer()
    write_block(w, b)
    return w.bytes()


def block_hash(b: Block) -> bytes:
    return sha256(block_bytes(b))


# -- state ------------------------------------------------------------------

@dataclass
class PendingTdm:
    """A submitted track awaiting attestation quorum."""

    tdm_text: str
    submitter: str
    escrow: int
    task_id: bytes = b""
    attestations: dict = field(default_factory=dict)    # attester -> report


@dataclass
class PoolEntry:
    """An uncorrelated track parked until association mines it."""

    tdm_text: str
    submitter: str


@dataclass
class ProposalState:
    proposal: ModelProposal
    votes: dict = field(default_factory=dict)           # voter -> vote


@dataclass(frozen=True)
class SettlementRecord:
    """One quorum outcome, kept in state for sustainability scoring."""

    height: int
    tdm_hash: str
    verdict: str
    object_id: str          # matched or mined id, "" when none
    site_id: str
    submitter: str
    rms: float
    first_epoch_t: float


@dataclass
class LedgerState:
    params: EconomicsParams
    vparams: ValidationParams
    accounts: dict = field(default_factory=dict)
    nonces: dict = field(default_factory=dict)
    catalog: dict = field(default_factory=dict)
    sites: dict = field(default_factory=dict)
    tasks: dict = field(default_factory=dict)
    task_escrows: dict = field(default_factory=dict)    # task_id -> (amount, requester)
    pending: dict = field(default_factory=dict)         # tdm_hash -> PendingTdm
    uct_pool: dict = field(default_factory=dict)        # tdm_hash -> PoolEntry
    seen_tdms: set = field(default_factory=set)
    model: ResidualModel = field(default_factory=ResidualModel)
    model_proposals: dict = field(default_factory=dict)
    settlements: list = field(default_factory=list)
    burned: int = 0
    minted: int = 0
    genesis_supply: int = 0
    step_s: float = 30.0
    time: float = 0.0
    height: int = 0         # next block height
    last_hash: bytes = ZERO_DIGEST

    def clone(self) -> "LedgerState":
        return copy.deepcopy(self)

    def account(self, account_id: str) -> Account:
        acct = self.accounts.get(account_id)
        if acct is None:
            raise TxRejected(f"unknown account {account_id!r}")
        return acct


def compute_stakes(state: LedgerState) -> dict:
    """Stake weights of accounts eligible for validation and the lottery."""
    return {a.account_id: a.staked for a in state.accounts.values()
            if "compute" in a.roles and a.staked > 0}


def conservation_delta(state: LedgerState) -> int:
    """Zero iff tokens are conserved: holdings + escrows + burned - minted
    must equal the genesis supply exactly."""
    held = sum(a.balance + a.staked for a in state.accounts.values())
    escrowed = sum(amount for amount, _ in state.task_escrows.values())
    escrowed += sum(p.escrow for p in state.pending.values())
    return held + escrowed + state.burned - state.minted - state.genesis_supply


def _write_elements(w: Writer, el: KeplerianElements) -> None:
    for v in (el.a, el.e, el.i, el.raan, el.argp, el.M, el.epoch.t):
        w.f64(v)


def _read_elements(r: Reader) -> KeplerianElements:
    v = [r.f64() for _ in range(7)]
    return KeplerianElements(a=v[0], e=v[1], i=v[2], raan=v[3], argp=v[4],
                             M=v[5], epoch=Epoch(v[6]))


def encode_state(state: LedgerState) -> bytes:
    """Canonical state snapshot; chain position (height, last_hash) is
    recoverable from the blocks themselves and stays out of the root."""
    w = Writer().raw(STATE_MAGIC).u8(1)
    w.blob(state.params.canonical_bytes())
    w.blob(state.vparams.canonical_bytes())
    w.f64(state.step_s).f64(state.time)
    w.u64(state.burned).u64(state.minted).u64(state.genesis_supply)

    w.u32(len(state.accounts))
    for aid in sorted(state.accounts):
        a = state.accounts[aid]
        w.string(aid).u64(a.balance).u64(a.staked)
        roles = sorted(a.roles)
        w.u8(len(roles))
        for role in roles:
            w.string(role)

    w.u32(len(state.nonces))
    for aid in sorted(state.nonces):
        w.string(aid).u64(state.nonces[aid])

    w.u32(len(state.sites))
    for sid in sorted(state.sites):
        s = state.sites[sid]
        w.string(sid).f64(s.lat).f64(s.lon).f64(s.alt)

    w.u32(len(state.catalog))
    for oid in sorted(state.catalog):
        rec = state.catalog[oid]
        w.string(oid)
        _write_elements(w, rec.elements)
        w.f64(rec.bstar).string(rec.source)

    w.u32(len(state.tasks))
    for tid in sorted(state.tasks):
        write_task(w, state.tasks[tid])

    w.u32(len(state.task_escrows))
    for tid in sorted(state.task_escrows):
        amount, requester = state.task_escrows[tid]
        w.digest(tid).u64(amount).string(requester)

    w.u32(len(state.pending))
    for h in sorted(state.pending):
        p = state.pending[h]
        w.string(h).string(p.tdm_text).string(p.submitter)
        w.u64(p.escrow).blob(p.task_id)
        w.u32(len(p.attestations))
        for attester in sorted(p.attestations):
            w.string(attester).blob(p.attestations[attester].canonical_bytes())

    w.u32(len(state.uct_pool))
    for h in sorted(state.uct_pool):
        e = state.uct_pool[h]
        w.string(h).string(e.tdm_text).string(e.submitter)

    w.u32(len(state.seen_tdms))
    for h in sorted(state.seen_tdms):
        w.string(h)

    for row in state.model.W:
        for v in row:
            w.f64(v)
    w.u64(state.model.version).u64(state.model.trained_on)

    w.u32(len(state.model_proposals))
    for h in sorted(state.model_proposals):
        ps = state.model_proposals[h]
        w.blob(ps.proposal.canonical_bytes())
        w.u32(len(ps.votes))
        for voter in sorted(ps.votes):
            w.string(voter).string(ps.votes[voter])

    w.u32(len(state.settlements))
    for s in state.settlements:
        w.u64(s.height).string(s.tdm_hash).string(s.verdict)
        w.string(s.object_id).string(s.site_id).string(s.submitter)
        w.f64(s.rms).f64(s.first_epoch_t)
    return w.bytes()


def decode_state(raw: bytes) -> LedgerState:
    r = Reader(raw)
    if r.raw(len(STATE_MAGIC)) != STATE_MAGIC:
        raise WireError("bad state magic")
    if r.u8() != 1:
        raise WireError("unsupported state version")

    pr = Reader(r.blob())
    stake_min = pr.u64()
    fracs = [Fraction(pr.u64(), pr.u64()) for _ in range(3)]
    params = EconomicsParams(
        observer_stake_min=stake_min, slash_fraction=fracs[0],
        validator_fee_cut=fracs[1], r_mint=pr.u64(), r_model=pr.u64(),
        block_subsidy=pr.u64(), attestation_quorum=fracs[2])
    pr.done()

    vr = Reader(r.blob())
    vvals = [vr.f64() for _ in range(8)]
    vparams = ValidationParams(
        theta_verify=vvals[0], theta_reject=vvals[1], theta_gate=vvals[2],
        d_assoc=vvals[3], w_a_per_km=vvals[4], w_e=vvals[5],
        w_i_per_deg=vvals[6], w_raan_per_deg=vvals[7])
    vr.done()

    state = LedgerState(params=params, vparams=vparams)
    state.step_s = r.f64()
    state.time = r.f64()
    state.burned = r.u64()
    state.minted = r.u64()
    state.genesis_supply = r.u64()

    for _ in range(r.u32()):
        aid = r.string()
        balance = r.u64()
        staked = r.u64()
        roles = {r.string() for _ in range(r.u8())}
        state.accounts[aid] = Account(account_id=aid, balance=balance,
                                      staked=staked, roles=roles)
    for _ in range(r.u32()):
        aid = r.string()
        state.nonces[aid] = r.u64()
    for _ in range(r.u32()):
        sid = r.string()
        state.sites[sid] = GroundSite(site_id=sid, lat=r.f64(), lon=r.f64(),
                                      alt=r.f64())
    for _ in range(r.u32()):
        oid = r.string()
        el = _read_elements(r)
        state.catalog[oid] = OrbitRecord(object_id=oid, elements=el,
                                         bstar=r.f64(), source=r.string())
    for _ in range(r.u32()):
        task = read_task(r)
        state.tasks[task.task_id] = task
    for _ in range(r.u32()):
        tid = r.digest()
        state.task_escrows[tid] = (r.u64(), r.string())
    for _ in range(r.u32()):
        h = r.string()
        p = PendingTdm(tdm_text=r.string(), submitter=r.string(),
                       escrow=r.u64(), task_id=r.blob())
        for _ in range(r.u32()):
            attester = r.string()
            sub = Reader(r.blob())
            p.attestations[attester] = read_report(sub)
            sub.done()
        state.pending[h] = p
    for _ in range(r.u32()):
        h = r.string()
        state.uct_pool[h] = PoolEntry(tdm_text=r.string(),
                                      submitter=r.string())
    state.seen_tdms = {r.string() for _ in range(r.u32())}

    W = tuple(tuple(r.f64() for _ in range(6)) for _ in range(3))
    state.model = ResidualModel(W=W, version=r.u64(), trained_on=r.u64())

    for _ in range(r.u32()):
        proposal = _read_proposal(r.blob())
        ps = ProposalState(proposal=proposal)
        for _ in range(r.u32()):
            voter = r.string()
            ps.votes[voter] = r.string()
        state.model_proposals[proposal.proposal_hash] = ps

    for _ in range(r.u32()):
        state.settlements.append(SettlementRecord(
            height=r.u64(), tdm_hash=r.string(), verdict=r.string(),
            object_id=r.string(), site_id=r.string(), submitter=r.string(),
            rms=r.f64(), first_epoch_t=r.f64()))
    r.done()
    return state


def state_root(state: LedgerState) -> bytes:
    return sha256(encode_state(state))


# -- genesis ----------------------------------------------------------------

def make_genesis(accounts: list, catalog: list, sites: list,
                 params: EconomicsParams, vparams: ValidationParams, *,
                 model: ResidualModel = None, step_s: float = 30.0,
                 time: float = 0.0) -> tuple:
    """Initial state plus block 0, whose single pseudo-transaction carries
    the canonical state snapshot every replay starts from."""
    state = LedgerState(params=params, vparams=vparams, step_s=step_s,
                        time=time)
    if model is not None:
        state.model = model
    for a in accounts:
        if a.account_id in state.accounts:
            raise LedgerError(f"duplicate account {a.account_id!r}")
        state.accounts[a.account_id] = copy.deepcopy(a)
    for rec in catalog:
        if rec.object_id in state.catalog:
            raise LedgerError(f"duplicate object {rec.object_id!r}")
        state.catalog[rec.object_id] = rec
    for site in sites:
        if site.site_id in state.sites:
            raise LedgerError(f"duplicate site {site.site_id!r}")
        state.sites[site.site_id] = site
    state.genesis_supply = sum(a.balance + a.staked
                               for a in state.accounts.values())
    snapshot = encode_state(state)
    gen_tx = Transaction(kind="genesis", sender="", nonce=0,
                         payload=GenesisPayload(snapshot=snapshot))
    block = Block(height=0, prev_hash=ZERO_DIGEST,
                  tx_root=compute_tx_root([gen_tx]),
                  state_root=sha256(snapshot), proposer="", time=time,
                  txs=(gen_tx,))
    state.height = 1
    state.last_hash = block_hash(block)
    return state, block


# -- validator lottery ------------------------------------------------------

def select_validator(prev_hash: bytes, round_no: int, stakes: dict) -> str:
    """Stake-weighted deterministic lottery.

    The winning ticket is SHA-256(prev_hash || round as 8-byte big endian)
    reduced mod total stake; accounts own contiguous ticket intervals in
    lexicographic id order.
    """
    total = sum(stakes.values())
    if total <= 0:
        raise LedgerError("no staked validators for this round")
    seed = sha256(prev_hash + round_no.to_bytes(8, "big"))
    ticket = int.from_bytes(seed, "big") % total
    acc = 0
    for aid in sorted(stakes):
        acc += stakes[aid]
        if ticket < acc:
            return aid
    raise AssertionError("unreachable: ticket below total stake")


# -- transaction application ------------------------------------------------

def _distribute(pot: int, weights: dict) -> dict:
    """Integer pro-rata split of pot by weights; remainder goes one token
    at a time to the lexicographically first recipients."""
    total = sum(weights.values())
    if pot <= 0 or total <= 0:
        return {}
    out = {}
    handed = 0
    for aid in sorted(weights):
        share = pot * weights[aid] // total
        out[aid] = share
        handed += share
    for aid in sorted(weights):
        if handed >= pot:
            break
        out[aid] += 1
        handed += 1
    return out


def _frac_mul(amount: int, f: Fraction) -> int:
    return amount * f.numerator // f.denominator


def _spawn_task(state: LedgerState, task: Task) -> None:
    # internal tasks are subsidy-funded at payout; nothing escrows here
    if task.task_id not in state.tasks:
        state.tasks[task.task_id] = task


def _retask_from_report(state: LedgerState, report: ValidationReport) -> None:
    """Internal follow-up task for an ambiguous or uct settlement."""
    now = Epoch(state.time)
    ref = bytes.fromhex(report.report_hash)
    if report.verdict == "ambiguous" and report.matched_object:
        target = report.matched_object
    elif (report.proposed_elements is not None
          and math.isfinite(report.rms_residual)):
        sol = IodSolution(elements=report.proposed_elements,
                          rms_residual=report.rms_residual,
                          method="refined", n_obs=0)
        target = region_from_solution(sol)
    else:
        return
    tid = task_identity(target, INTERNAL_TASK_FEE, False, "internal", now, ref)
    _spawn_task(state, Task(task_id=tid, target=target,
                            fee=INTERNAL_TASK_FEE, urgency=False,
                            origin="internal", created_at=now))


def _pay_task(state: LedgerState, pend: PendingTdm, attesters: list) -> None:
    """Fee payout when a tracked task is serviced: the validator cut is
    split pro rata by stake, the rest goes to the submitting observer."""
    task = state.tasks.get(pend.task_id)
    if task is None or task.status not in ("open", "assigned"):
        return
    fee = task.fee
    if task.origin == "internal":
        state.minted += fee     # subsidy-funded
    else:
        amount, _ = state.task_escrows.pop(task.task_id, (0, ""))
        if amount != fee:       # escrow always equals fee by construction
            fee = amount
    cut = _frac_mul(fee, state.params.validator_fee_cut)
    weights = {aid: state.accounts[aid].staked for aid in attesters
               if aid in state.accounts}
    for aid, share in _distribute(cut, weights).items():
        state.accounts[aid].balance += share
    state.account(pend.submitter).balance += fee - cut
    state.tasks[task.task_id] = task.with_status("fulfilled")


def _settle(state: LedgerState, tdm_hash_hex: str, report: ValidationReport,
            attesters: list) -> None:
    pend = state.pending.pop(tdm_hash_hex)
    submitter = state.account(pend.submitter)
    tdm = parse_tdm(pend.tdm_text)
    verdict = report.verdict
    object_id = report.matched_object or ""

    if verdict == "rejected":
        slash = _frac_mul(pend.escrow, state.params.slash_fraction)
        state.burned += slash
        submitter.balance += pend.escrow - slash
    else:
        submitter.balance += pend.escrow

    if verdict == "verified":
        if pend.task_id:
            _pay_task(state, pend, attesters)
        rec = state.catalog.get(report.matched_object)
        t_last = tdm.records[-1].epoch
        if rec is not None and t_last.t > rec.elements.epoch.t:
            # refresh the catalog epoch so task priorities age correctly
            try:
                sv = propagate_j2(rec.elements, rec.bstar, t_last,
                                  step_s=state.step_s)
                state.catalog[rec.object_id] = dataclasses.replace(
                    rec, elements=state_to_kepler(sv))
            except DecayError:
                pass
    elif verdict == "ambiguous":
        _retask_from_report(state, report)
    elif verdict == "uct":
        mined = None
        pool_tdms = []
        pool_hashes = [h for h in report.uct_matches if h in state.uct_pool]
        for h in pool_hashes:
            pool_tdms.append(parse_tdm(state.uct_pool[h].tdm_text))
        if pool_tdms:
            mined = mine_object(pool_tdms + [tdm], state.sites, state.vparams,
                                step_s=state.step_s)
        if mined is not None and mined.object_id not in state.catalog:
            state.catalog[mined.object_id] = mined
            object_id = mined.object_id
            contributors = {pend.submitter}
            contributors.update(state.uct_pool[h].submitter
                                for h in pool_hashes)
            weights = {aid: 1 for aid in contributors}
            state.minted += state.params.r_mint
            for aid, share in _distribute(state.params.r_mint,
                                          weights).items():
                state.account(aid).balance += share
            for h in pool_hashes:
                del state.uct_pool[h]
            if pend.task_id:
                _pay_task(state, pend, attesters)
        else:
            state.uct_pool[tdm_hash_hex] = PoolEntry(tdm_text=pend.tdm_text,
                                                     submitter=pend.submitter)
            _retask_from_report(state, report)

    state.settlements.append(SettlementRecord(
        height=state.height, tdm_hash=tdm_hash_hex, verdict=verdict,
        object_id=object_id, site_id=tdm.meta.site_id,
        submitter=pend.submitter, rms=report.rms_residual,
        first_epoch_t=tdm.records[0].epoch.t))


def _check_quorum(state: LedgerState, tdm_hash_hex: str) -> None:
    pend = state.pending[tdm_hash_hex]
    stakes = compute_stakes(state)
    total = sum(stakes.values())
    if total <= 0:
        return
    groups = {}
    for attester, report in pend.attestations.items():
        key = (report.verdict, report.report_hash)
        groups.setdefault(key, []).append(attester)
    q = state.params.attestation_quorum
    for key in sorted(groups):
        attesters = sorted(groups[key])
        weight = sum(stakes.get(a, 0) for a in attesters)
        if weight * q.denominator >= total * q.numerator:
            _settle(state, tdm_hash_hex, pend.attestations[attesters[0]],
                    attesters)
            return


def _settle_proposal(state: LedgerState, proposal_hash: bytes) -> None:
    ps = state.model_proposals[proposal_hash]
    stakes = compute_stakes(state)
    total = sum(stakes.values())
    if total <= 0:
        return
    q = state.params.attestation_quorum
    for choice in ("accept", "reject"):
        weight = sum(stakes.get(v, 0) for v, vote in ps.votes.items()
                     if vote == choice)
        if weight * q.denominator < total * q.numerator:
            continue
        del state.model_proposals[proposal_hash]
        if choice == "accept":
            # a competing merge may have advanced the model; stale winners
            # are discarded without reward
            if ps.proposal.parent_version == state.model.version:
                state.model = merge_model(state.model, ps.proposal)
                proposer = state.accounts.get(ps.proposal.proposer)
                if proposer is not None:
                    state.minted += state.params.r_model
                    proposer.balance += state.params.r_model
        return


def compute_attestation(state: LedgerState, tdm_hash_hex: str,
                        *, j2: float = J2_EARTH) -> ValidationReport:
    """The report an honest validator attests to for a pending TDM.

    Runs the deterministic validation pipeline against the current
    catalog and, for uncorrelated tracks, associates against the on-chain
    UCT pool so settlement knows which tracks to mine together. Every
    honest node holding the same state produces the identical report.
    """
    from .validation import _refined_iod     # shared per-track fit

    pend = state.pending.get(tdm_hash_hex)
    if pend is None:
        raise LedgerError(f"no pending TDM {tdm_hash_hex[:12]}")
    tdm = parse_tdm(pend.tdm_text)
    catalog = [state.catalog[k] for k in sorted(state.catalog)]
    report = validate_tdm(tdm, catalog, state.sites, state.vparams,
                          state.model, step_s=state.step_s, j2=j2)
    if report.verdict != "uct" or not state.uct_pool:
        return report
    pool_sols = []
    for h in sorted(state.uct_pool):
        entry = state.uct_pool[h]
        p_tdm = parse_tdm(entry.tdm_text)
        sol = _refined_iod(p_tdm, state.sites[p_tdm.meta.site_id],
                           state.step_s, j2)
        if sol is not None:
            pool_sols.append((h, sol))
    new_sol = IodSolution(elements=report.proposed_elements,
                          rms_residual=report.rms_residual,
                          method="refined", n_obs=len(tdm.records))
    matches = associate_uct(new_sol, pool_sols, state.vparams,
                            step_s=state.step_s, j2=j2)
    if not matches:
        return report
    return dataclasses.replace(report,
                               uct_matches=tuple(h for h, _ in matches))


def _apply(state: LedgerState, tx: Transaction) -> None:
    """Mutating apply with check-first discipline: TxRejected may only be
    raised before the first state mutation."""
    if tx.kind == "genesis":
        raise TxRejected("genesis is only valid at height 0")
    sender = state.accounts.get(tx.sender)
    if sender is None:
        raise TxRejected(f"unknown sender {tx.sender!r}")
    expected = state.nonces.get(tx.sender, 0)
    if tx.nonce != expected:
        raise TxRejected(f"bad nonce {tx.nonce} for {tx.sender!r} "
                         f"(expected {expected})")
    p = tx.payload

    if tx.kind == "submit_tdm":
        if "observer" not in sender.roles:
            raise TxRejected(f"{tx.sender!r} lacks the observer role")
        stake_min = state.params.observer_stake_min
        if sender.balance < stake_min:
            raise TxRejected("insufficient balance for observer escrow")
        try:
            tdm = parse_tdm(p.tdm_text)
        except TdmError as exc:
            raise TxRejected(f"malformed TDM: {exc}")
        if serialize_tdm(tdm) != p.tdm_text:
            raise TxRejected("TDM text is not in canonical form")
        if tdm.meta.site_id not in state.sites:
            raise TxRejected(f"unregistered site {tdm.meta.site_id!r}")
        h = tdm.hex_hash()
        if h in state.seen_tdms:
            raise TxRejected(f"duplicate TDM {h[:12]}")
        if p.task_id:
            task = state.tasks.get(p.task_id)
            if task is None:
                raise TxRejected("unknown task reference")
            if task.status not in ("open", "assigned"):
                raise TxRejected(f"task is {task.status}, not serviceable")
        sender.balance -= stake_min
        state.seen_tdms.add(h)
        state.pending[h] = PendingTdm(tdm_text=p.tdm_text,
                                      submitter=tx.sender, escrow=stake_min,
                                      task_id=p.task_id)

    elif tx.kind == "post_task":
        if "requester" not in sender.roles:
            raise TxRejected(f"{tx.sender!r} lacks the requester role")
        if p.origin not in ("external", "calibration"):
            raise TxRejected(f"requesters cannot post {p.origin!r} tasks")
        if not isinstance(p.fee, int) or p.fee < 0:
            raise TxRejected("fee must be a nonnegative integer")
        if sender.balance < p.fee:
            raise TxRejected("insufficient balance for task fee")
        created_at = Epoch(state.time)
        ref = tx.sender.encode("utf-8") + tx.nonce.to_bytes(8, "big")
        tid = task_identity(p.target, p.fee, p.urgency, p.origin,
                            created_at, ref)
        if tid in state.tasks:
            raise TxRejected("task already exists")
        task = Task(task_id=tid, target=p.target, fee=p.fee,
                    urgency=p.urgency, origin=p.origin, created_at=created_at)
        sender.balance -= p.fee
        state.tasks[tid] = task
        state.task_escrows[tid] = (p.fee, tx.sender)

    elif tx.kind == "register_stake":
        if p.role not in ROLES:
            raise TxRejected(f"unknown role {p.role!r}")
        if not isinstance(p.amount, int) or p.amount < 0:
            raise TxRejected("stake amount must be a nonnegative integer")
        if sender.balance < p.amount:
            raise TxRejected("insufficient balance to stake")
        sender.balance -= p.amount
        sender.staked += p.amount
        sender.roles.add(p.role)

    elif tx.kind == "attest_validation":
        if "compute" not in sender.roles or sender.staked <= 0:
            raise TxRejected("attestation requires a staked compute account")
        h = p.report.tdm_hash
        pend = state.pending.get(h)
        if pend is None:
            raise TxRejected(f"attestation references unknown TDM {h[:12]}")
        if tx.sender in pend.attestations:
            raise TxRejected("duplicate attestation")
        pend.attestations[tx.sender] = p.report
        _check_quorum(state, h)

    elif tx.kind == "propose_model":
        if "compute" not in sender.roles or sender.staked <= 0:
            raise TxRejected("proposal requires a staked compute account")
        if p.proposal.proposer != tx.sender:
            raise TxRejected("proposal must be signed by its proposer")
        if p.proposal.parent_version != state.model.version:
            raise TxRejected(f"stale proposal (parent "
                             f"{p.proposal.parent_version}, model "
                             f"{state.model.version})")
        if p.proposal.proposal_hash in state.model_proposals:
            raise TxRejected("proposal already pending")
        state.model_proposals[p.proposal.proposal_hash] = ProposalState(
            proposal=p.proposal)

    elif tx.kind == "vote_model":
        if "compute" not in sender.roles or sender.staked <= 0:
            raise TxRejected("vote requires a staked compute account")
        if p.vote not in ("accept", "reject"):
            raise TxRejected(f"vote must be accept or reject, got {p.vote!r}")
        ps = state.model_proposals.get(p.proposal_hash)
        if ps is None:
            raise TxRejected("vote references unknown proposal")
        if tx.sender in ps.votes:
            raise TxRejected("duplicate vote")
        ps.votes[tx.sender] = p.vote
        _settle_proposal(state, p.proposal_hash)

    else:   # claim_reward
        task = state.tasks.get(p.task_id)
        if task is None:
            raise TxRejected("unknown task")
        if task.status != "expired":
            raise TxRejected(f"task is {task.status}, not expired")
        escrow = state.task_escrows.get(p.task_id)
        if escrow is None:
            raise TxRejected("task has no refundable escrow")
        amount, requester = escrow
        if requester != tx.sender:
            raise TxRejected("only the requester may reclaim the fee")
        del state.task_escrows[p.task_id]
        sender.balance += amount

    state.nonces[tx.sender] = expected + 1


def apply_transaction(state: LedgerState, tx: Transaction) -> LedgerState:
    """Pure transition: returns the post-state, raises TxRejected (with the
    input state untouched) when the transaction cannot apply."""
    out = state.clone()
    _apply(out, tx)
    return out


def _sweep_expired(state: LedgerState) -> None:
    now = Epoch(state.time)
    for tid in sorted(state.tasks):
        task = state.tasks[tid]
        if is_expired(task, now):
            state.tasks[tid] = task.with_status("expired")


def _advance(state: LedgerState, txs, proposer: str, time: float) -> tuple:
    """Shared block transition: returns (applied, excluded) after mutating
    state through the expiry sweep, the txs, and the proposer subsidy."""
    state.time = time
    _sweep_expired(state)
    applied = []
    excluded = []
    for tx in sorted(txs, key=lambda t: (t.sender, t.nonce, tx_hash(t))):
        try:
            _apply(state, tx)
            applied.append(tx)
        except TxRejected as exc:
            excluded.append((tx, str(exc)))
    state.minted += state.params.block_subsidy
    state.account(proposer).balance += state.params.block_subsidy
    return applied, excluded


def produce_block(state: LedgerState, pending_txs: list, round_no: int, *,
                  time: float = None) -> tuple:
    """Run the round's lottery, apply what fits, and seal a block.

    Returns (new_state, block). Invalid transactions are excluded
    deterministically; the block subsidy mints to the proposer even when
    no transaction applies.
    """
    if round_no != state.height:
        raise LedgerError(f"round {round_no} != next height {state.height}")
    if time is None:
        time = state.time
    if time < state.time:
        raise LedgerError("block time cannot run backwards")
    proposer = select_validator(state.last_hash, round_no,
                                compute_stakes(state))
    work = state.clone()
    applied, _ = _advance(work, pending_txs, proposer, time)
    block = Block(height=round_no, prev_hash=state.last_hash,
                  tx_root=compute_tx_root(applied),
                  state_root=state_root(work), proposer=proposer, time=time,
                  txs=tuple(applied))
    work.height = round_no + 1
    work.last_hash = block_hash(block)
    return work, block


def verify_chain(blocks: list):
    """Replay a chain from its genesis snapshot; None when every link,
    root, lottery pick, and transaction checks out, else the first bad
    height."""
    if not blocks:
        return 0
    b0 = blocks[0]
    if (b0.height != 0 or b0.prev_hash != ZERO_DIGEST or len(b0.txs) != 1
            or b0.txs[0].kind != "genesis"):
        return 0
    snapshot = b0.txs[0].payload.snapshot
    if (b0.state_root != sha256(snapshot)
            or b0.tx_root != compute_tx_root(b0.txs)):
        return 0
    try:
        state = decode_state(snapshot)
    except (WireError, SdaError, ValueError):
        return 0
    state.height = 1
    state.last_hash = block_hash(b0)

    for k, b in enumerate(blocks[1:], start=1):
        if b.height != k or b.prev_hash != state.last_hash:
            return k
        if b.time < state.time:
            return k
        try:
            proposer = select_validator(state.last_hash, k,
                                        compute_stakes(state))
        except LedgerError:
            return k
        if b.proposer != proposer:
            return k
        if b.tx_root != compute_tx_root(b.txs):
            return k
        work = state.clone()
        try:
            applied, _ = _advance(work, b.txs, proposer, b.time)
        except SdaError:
            return k
        if tuple(applied) != tuple(b.txs):
            return k
        if b.state_root != state_root(work):
            return k
        work.height = k + 1
        work.last_hash = block_hash(b)
        state = work
    return None


def replay_state(blocks: list) -> LedgerState:
    """State after replaying a verified chain; raises on a bad chain."""
    bad = verify_chain(blocks)
    if bad is not None:
        raise LedgerError(f"chain fails verification at height {bad}")
    state = decode_state(blocks[0].txs[0].payload.snapshot)
    state.height = 1
    state.last_hash = block_hash(blocks[0])
    for b in blocks[1:]:
        _advance(state, b.txs, b.proposer, b.time)
        state.height = b.height + 1
        state.last_hash = block_hash(b)
    return state


# -- persistence ------------------------------------------------------------

def save_chain(path: str, blocks: list) -> None:
    write_chain_log(path, [block_bytes(b) for b in blocks])


def append_block(path: str, block: Block) -> None:
    append_chain_log(path, block_bytes(block))


def load_chain(path: str) -> list:
    blocks = []
    for raw in read_chain_log(path):
        r = Reader(raw)
        blocks.append(read_block(r))
        r.done()
    return blocks


def verify_chain_file(path: str):
    """Like verify_chain, but a record that fails to decode counts as the
    first bad height."""
    try:
        records = read_chain_log(path)
    except WireError:
        return 0
    blocks = []
    for k, raw in enumerate(records):
        try:
            r = Reader(raw)
            blocks.append(read_block(r))
            r.done()
        except (WireError, SdaError, ValueError):
            return k
    return verify_chain(blocks)
