"""Policy pipeline: administration (XML load), attribute resolution, decision, enforcement.

The policy model is a deliberately small XACML-style subset: a PolicySet of
Policies, each an ordered list of Permit/Deny Rules with flat attribute-match
targets, one optional boolean condition tree per rule, three combining
algorithms, and obligations that gate a Permit/Deny before enforcement.
"""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Any, Callable, Mapping

from . import registrar as registrar_mod
from . import tokens


class PolicyError(Exception):
    """Base class for policy failures."""


class XmlMalformed(PolicyError):
    pass


class SchemaViolation(PolicyError):
    pass


class DuplicateId(PolicyError):
    pass


class UnknownCombiningAlgorithm(PolicyError):
    pass


class MissingAttribute(PolicyError):
    def __init__(self, category: "Category", name: str):
        super().__init__(f"attribute {category.value}:{name} is not resolvable")
        self.category = category
        self.name = name


class Category(Enum):
    SUBJECT = "Subject"
    RESOURCE = "Resource"
    ACTION = "Action"
    ENVIRONMENT = "Environment"


AttributeValue = str | int | bool
AttributeId = tuple[Category, str]


class AttributeBag:
    """Attribute values keyed by (category, name); absence is distinct from empty."""

    def __init__(self, entries: Mapping[AttributeId, list[AttributeValue]] | None = None):
        self.entries: dict[AttributeId, list[AttributeValue]] = dict(entries or {})

    def get(self, category: Category, name: str) -> list[AttributeValue] | None:
        return self.entries.get((category, name))

    def put(self, category: Category, name: str, values: list[AttributeValue]) -> None:
        self.entries[(category, name)] = list(values)

    @classmethod
    def single_category(
        cls, category: Category, values: Mapping[str, list[AttributeValue]]
    ) -> "AttributeBag":
        return cls({(category, name): list(vals) for name, vals in values.items()})


@dataclass
class AccessRequest:
    subject: AttributeBag
    resource_id: str
    resource: AttributeBag
    action: str
    environment: AttributeBag
    token_claims: tokens.ClaimSet | None = None

    def validate(self) -> None:
        if not self.action:
            raise PolicyError("action must be non-empty")


@dataclass
class AttributeSources:
    """Attribute resolution order: request bags, then token claims, then the clock."""

    now: int | None = None

    def resolve(self, request: AccessRequest, category: Category, name: str) -> list[AttributeValue]:
        inline = self._inline(request, category, name)
        if inline is not None:
            return inline
        if category is Category.SUBJECT and request.token_claims is not None:
            from_claims = self._from_claims(request.token_claims, name)
            if from_claims is not None:
                return from_claims
        if category is Category.ENVIRONMENT and name == "current-time" and self.now is not None:
            return [self.now]
        raise MissingAttribute(category, name)

    @staticmethod
    def _inline(request: AccessRequest, category: Category, name: str) -> list[AttributeValue] | None:
        if category is Category.SUBJECT:
            return request.subject.get(category, name)
        if category is Category.RESOURCE:
            if name == "resource-id":
                return [request.resource_id]
            return request.resource.get(category, name)
        if category is Category.ACTION:
            if name == "action":
                return [request.action]
            return None
        return request.environment.get(category, name)

    @staticmethod
    def _from_claims(claims: tokens.ClaimSet, name: str) -> list[AttributeValue] | None:
        if name == "scope":
            return list(claims.scope)
        if name == "aud":
            return [claims.aud]
        if name == "client_id":
            return [claims.client_id]
        if name == "authorities" and claims.authorities is not None:
            return [claims.authorities]
        if name == "user_name" and claims.user_name is not None:
            return [claims.user_name]
        return None


def pip_resolve(
    request: AccessRequest, attribute_id: AttributeId, sources: AttributeSources
) -> list[AttributeValue]:
    """Resolve one attribute id; raises MissingAttribute when no source has it."""
    category, name = attribute_id
    return sources.resolve(request, category, name)


class MatchOp(Enum):
    EQUALS = "Equals"
    LESS = "Less"
    GREATER = "Greater"
    IN_SET = "InSet"
    PREFIX_OF = "PrefixOf"


@dataclass(frozen=True)
class Match:
    """One attribute comparison; InSet literals hold multiple values."""

    category: Category
    name: str
    op: MatchOp
    literal: AttributeValue | tuple[AttributeValue, ...]


@dataclass(frozen=True)
class Target:
    matches: tuple[Match, ...] = ()


class Effect(Enum):
    PERMIT = "Permit"
    DENY = "Deny"


@dataclass(frozen=True)
class Compare:
    category: Category
    name: str
    op: MatchOp
    literal: AttributeValue | tuple[AttributeValue, ...]


@dataclass(frozen=True)
class And:
    children: tuple["Condition", ...]


@dataclass(frozen=True)
class Or:
    children: tuple["Condition", ...]


@dataclass(frozen=True)
class Not:
    child: "Condition"


Condition = Compare | And | Or | Not


@dataclass(frozen=True)
class Rule:
    id: str
    effect: Effect
    target: Target = Target()
    condition: Condition | None = None


class Combining(Enum):
    DENY_OVERRIDES = "deny-overrides"
    PERMIT_OVERRIDES = "permit-overrides"
    FIRST_APPLICABLE = "first-applicable"


@dataclass(frozen=True)
class Obligation:
    id: str
    applies_on: Effect
    params: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class Policy:
    id: str
    rules: tuple[Rule, ...]
    combining: Combining
    target: Target = Target()
    obligations: tuple[Obligation, ...] = ()


@dataclass(frozen=True)
class PolicySet:
    id: str
    policies: tuple[Policy, ...]
    combining: Combining


class Outcome(Enum):
    PERMIT = "Permit"
    DENY = "Deny"
    NOT_APPLICABLE = "NotApplicable"
    INDETERMINATE = "Indeterminate"


@dataclass
class Decision:
    outcome: Outcome
    obligations: list[Obligation] = field(default_factory=list)
    trace: list[tuple[str, Outcome]] = field(default_factory=list)


# --- policy administration (load + schema validation) ----------------------


def _load_schema() -> dict[str, Any]:
    raw = resources.files("capodaz").joinpath("data/policy-schema.json").read_text("utf-8")
    return json.loads(raw)


_SCHEMA = _load_schema()


def _validate_element(elem: ET.Element, path: str) -> None:
    spec = _SCHEMA["elements"].get(elem.tag)
    if spec is None:
        raise SchemaViolation(f"{path}: unknown element <{elem.tag}>")
    attr_spec = spec["attributes"]
    for name in elem.attrib:
        if name not in attr_spec:
            raise SchemaViolation(f"{path}: unknown attribute {name!r} on <{elem.tag}>")
    for name, rules in attr_spec.items():
        if rules.get("required") and name not in elem.attrib:
            raise SchemaViolation(f"{path}: <{elem.tag}> requires attribute {name!r}")
        if name in elem.attrib and "values" in rules and elem.attrib[name] not in rules["values"]:
            raise SchemaViolation(
                f"{path}: attribute {name}={elem.attrib[name]!r} not in {rules['values']}"
            )
    groups = spec["children"]
    allowed = {name for group in groups for name in group["elements"]}
    counts: dict[int, int] = {i: 0 for i in range(len(groups))}
    for child in elem:
        if child.tag not in allowed:
            raise SchemaViolation(f"{path}: <{child.tag}> not allowed inside <{elem.tag}>")
        for i, group in enumerate(groups):
            if child.tag in group["elements"]:
                counts[i] += 1
                break
        _validate_element(child, f"{path}/{child.tag}")
    for i, group in enumerate(groups):
        lo = group.get("min", 0)
        hi = group.get("max")
        label = "|".join(group["elements"])
        if counts[i] < lo:
            raise SchemaViolation(f"{path}: <{elem.tag}> needs at least {lo} <{label}> child(ren)")
        if hi is not None and counts[i] > hi:
            raise SchemaViolation(f"{path}: <{elem.tag}> allows at most {hi} <{label}> child(ren)")


def _parse_literal(raw: str, type_name: str, op: MatchOp, path: str):
    def one(text: str) -> AttributeValue:
        if type_name == "int" or type_name == "time":
            try:
                return int(text)
            except ValueError:
                raise SchemaViolation(f"{path}: literal {text!r} is not an integer") from None
        if type_name == "bool":
            if text in ("true", "false"):
                return text == "true"
            raise SchemaViolation(f"{path}: literal {text!r} is not a boolean")
        return text

    if op is MatchOp.IN_SET:
        return tuple(one(part.strip()) for part in raw.split(","))
    return one(raw)


def _parse_match(elem: ET.Element, path: str) -> Match:
    op = MatchOp(elem.attrib["op"])
    literal = _parse_literal(elem.attrib["value"], elem.attrib.get("type", "text"), op, path)
    return Match(Category(elem.attrib["category"]), elem.attrib["attr"], op, literal)


def _parse_condition(elem: ET.Element, path: str) -> Condition:
    if elem.tag == "Compare":
        m = _parse_match(elem, path)
        return Compare(m.category, m.name, m.op, m.literal)
    children = tuple(_parse_condition(child, f"{path}/{child.tag}") for child in elem)
    if elem.tag == "And":
        return And(children)
    if elem.tag == "Or":
        return Or(children)
    return Not(children[0])


def _parse_target(elem: ET.Element | None, path: str) -> Target:
    if elem is None:
        return Target()
    return Target(tuple(_parse_match(m, f"{path}/Match") for m in elem))


def _parse_combining(raw: str, path: str) -> Combining:
    try:
        return Combining(raw)
    except ValueError:
        raise UnknownCombiningAlgorithm(f"{path}: unknown combining algorithm {raw!r}") from None


def pap_load(document: bytes | str) -> PolicySet:
    """Parse and validate an XML policy document into a PolicySet."""
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        raise XmlMalformed(str(exc)) from exc
    if root.tag != _SCHEMA["root"]:
        raise SchemaViolation(f"root element must be <{_SCHEMA['root']}>, got <{root.tag}>")
    _validate_element(root, root.tag)

    policies = []
    policy_ids: set[str] = set()
    for p_elem in root.findall("Policy"):
        pid = p_elem.attrib["id"]
        if pid in policy_ids:
            raise DuplicateId(f"duplicate policy id {pid!r}")
        policy_ids.add(pid)
        rules = []
        rule_ids: set[str] = set()
        for r_elem in p_elem.findall("Rule"):
            rid = r_elem.attrib["id"]
            if rid in rule_ids:
                raise DuplicateId(f"duplicate rule id {rid!r} in policy {pid!r}")
            rule_ids.add(rid)
            cond_elem = r_elem.find("Condition")
            condition = None
            if cond_elem is not None:
                expr = list(cond_elem)[0]
                condition = _parse_condition(expr, f"{pid}/{rid}/Condition")
            rules.append(
                Rule(
                    id=rid,
                    effect=Effect(r_elem.attrib["effect"]),
                    target=_parse_target(r_elem.find("Target"), f"{pid}/{rid}"),
                    condition=condition,
                )
            )
        obligations = tuple(
            Obligation(
                id=o_elem.attrib["id"],
                applies_on=Effect(o_elem.attrib["appliesOn"]),
                params=tuple(
                    (param.attrib["name"], param.attrib["value"]) for param in o_elem
                ),
            )
            for o_elem in p_elem.findall("Obligation")
        )
        policies.append(
            Policy(
                id=pid,
                rules=tuple(rules),
                combining=_parse_combining(p_elem.attrib["combining"], pid),
                target=_parse_target(p_elem.find("Target"), pid),
                obligations=obligations,
            )
        )
    return PolicySet(
        id=root.attrib["id"],
        policies=tuple(policies),
        combining=_parse_combining(root.attrib["combining"], root.tag),
    )


# --- decision (PDP) ---------------------------------------------------------


def _op_compatible(value: AttributeValue, op: MatchOp, literal) -> bool:
    if op in (MatchOp.EQUALS, MatchOp.IN_SET):
        items = literal if isinstance(literal, tuple) else (literal,)
        return any(type(value) is type(item) for item in items)
    if op in (MatchOp.LESS, MatchOp.GREATER):
        return type(value) is type(literal) and isinstance(value, (int, str)) and not isinstance(value, bool)
    return isinstance(value, str) and isinstance(literal, str)  # PrefixOf


def _op_apply(value: AttributeValue, op: MatchOp, literal) -> bool:
    if op is MatchOp.EQUALS:
        return type(value) is type(literal) and value == literal
    if op is MatchOp.IN_SET:
        return any(type(value) is type(item) and value == item for item in literal)
    if op is MatchOp.LESS:
        return value < literal
    if op is MatchOp.GREATER:
        return value > literal
    return value.startswith(literal)  # PrefixOf


def _target_matches(target: Target, request: AccessRequest, sources: AttributeSources) -> bool:
    """Missing attributes and type mismatches make a target clause a non-match."""
    for m in target.matches:
        try:
            values = sources.resolve(request, m.category, m.name)
        except MissingAttribute:
            return False
        if not any(_op_compatible(v, m.op, m.literal) and _op_apply(v, m.op, m.literal) for v in values):
            return False
    return True


_IND = object()  # three-valued logic sentinel


def _eval_condition(cond: Condition, request: AccessRequest, sources: AttributeSources):
    if isinstance(cond, Compare):
        try:
            values = sources.resolve(request, cond.category, cond.name)
        except MissingAttribute:
            return _IND
        compatible = [v for v in values if _op_compatible(v, cond.op, cond.literal)]
        if values and not compatible:
            return _IND  # type error: nothing comparable
        return any(_op_apply(v, cond.op, cond.literal) for v in compatible)
    if isinstance(cond, Not):
        inner = _eval_condition(cond.child, request, sources)
        return _IND if inner is _IND else not inner
    results = [_eval_condition(child, request, sources) for child in cond.children]
    if isinstance(cond, And):
        if any(r is False for r in results):
            return False
        if any(r is _IND for r in results):
            return _IND
        return True
    if any(r is True for r in results):
        return True
    if any(r is _IND for r in results):
        return _IND
    return False


def _eval_rule(rule: Rule, request: AccessRequest, sources: AttributeSources) -> Outcome:
    if not _target_matches(rule.target, request, sources):
        return Outcome.NOT_APPLICABLE
    if rule.condition is not None:
        result = _eval_condition(rule.condition, request, sources)
        if result is _IND:
            return Outcome.INDETERMINATE
        if result is False:
            return Outcome.NOT_APPLICABLE
    return Outcome.PERMIT if rule.effect is Effect.PERMIT else Outcome.DENY


def combine_outcomes(outcomes: list[Outcome], algorithm: Combining) -> Outcome:
    """Fold child outcomes into one, per the combining-algorithm tables."""
    if algorithm is Combining.FIRST_APPLICABLE:
        for o in outcomes:
            if o is not Outcome.NOT_APPLICABLE:
                return o
        return Outcome.NOT_APPLICABLE
    if algorithm is Combining.DENY_OVERRIDES:
        first, second = Outcome.DENY, Outcome.PERMIT
    else:
        first, second = Outcome.PERMIT, Outcome.DENY
    if first in outcomes:
        return first
    if Outcome.INDETERMINATE in outcomes:
        return Outcome.INDETERMINATE
    if second in outcomes:
        return second
    return Outcome.NOT_APPLICABLE


def pdp_evaluate(
    policy_set: PolicySet, request: AccessRequest, sources: AttributeSources
) -> Decision:
    """Evaluate the policy set to a Decision; all failures fold into the outcome."""
    request.validate()
    trace: list[tuple[str, Outcome]] = []
    policy_outcomes: list[Outcome] = []
    for policy in policy_set.policies:
        if not _target_matches(policy.target, request, sources):
            policy_outcomes.append(Outcome.NOT_APPLICABLE)
            continue
        rule_outcomes: list[Outcome] = []
        for rule in policy.rules:
            outcome = _eval_rule(rule, request, sources)
            trace.append((rule.id, outcome))
            rule_outcomes.append(outcome)
            if (
                policy.combining is Combining.FIRST_APPLICABLE
                and outcome is not Outcome.NOT_APPLICABLE
            ):
                break
        policy_outcomes.append(combine_outcomes(rule_outcomes, policy.combining))
    final = combine_outcomes(policy_outcomes, policy_set.combining)
    obligations: list[Obligation] = []
    if final in (Outcome.PERMIT, Outcome.DENY):
        for policy, outcome in zip(policy_set.policies, policy_outcomes):
            if outcome is final:
                obligations.extend(
                    ob for ob in policy.obligations if ob.applies_on.value == final.value
                )
    return Decision(outcome=final, obligations=obligations, trace=trace)


# --- enforcement (PEP) ------------------------------------------------------


class DenyReason(Enum):
    TOKEN_INVALID = "TokenInvalid"
    TOKEN_EXPIRED = "TokenExpired"
    TOKEN_REVOKED = "TokenRevoked"
    POLICY_DENY = "PolicyDeny"
    POLICY_NOT_APPLICABLE = "PolicyNotApplicable"
    POLICY_INDETERMINATE = "PolicyIndeterminate"
    OBLIGATION_FAILED = "ObligationFailed"


@dataclass
class ResourceRequest:
    """An intercepted resource access, before token verification."""

    token_wire: bytes | None
    resource_id: str
    action: str
    resource_attributes: AttributeBag = field(default_factory=AttributeBag)
    subject_attributes: AttributeBag = field(default_factory=AttributeBag)
    environment_attributes: AttributeBag = field(default_factory=AttributeBag)
    source: str = ""


@dataclass
class EnforcementResult:
    allowed: bool
    reason: DenyReason | None = None
    detail: str = ""
    decision: Decision | None = None
    claims: tokens.ClaimSet | None = None

    def reason_text(self) -> str:
        if self.allowed or self.reason is None:
            return "Allow"
        if self.reason is DenyReason.OBLIGATION_FAILED:
            return f"ObligationFailed({self.detail})"
        return self.reason.value


ObligationValidator = Callable[[AccessRequest, Obligation, int], bool]
ObligationValidators = Mapping[str, ObligationValidator]


def pep_enforce(
    raw_request: ResourceRequest,
    policy_set: PolicySet,
    registrar_handle: "registrar_mod.Registrar",
    validators: ObligationValidators,
    now: int,
    *,
    issuer_key: tokens.CoseKey,
) -> EnforcementResult:
    """Deny-biased enforcement: token checks, then PDP, then obligations.

    A revoked token is refused before any policy evaluation; revocation also
    outranks expiry when both hold.
    """
    if not raw_request.token_wire:
        return EnforcementResult(False, DenyReason.TOKEN_INVALID, "missing bearer token")

    expired_on_wire = False
    try:
        claims = tokens.verify_token(raw_request.token_wire, issuer_key, now)
    except tokens.Expired as exc:
        expired_on_wire = True
        claims = exc.claims
    except tokens.TokenError as exc:
        return EnforcementResult(False, DenyReason.TOKEN_INVALID, str(exc))

    status = registrar_handle.lookup(claims.jti, now)
    jti = claims.jti
    if status is registrar_mod.TokenStatus.REVOKED:
        return EnforcementResult(False, DenyReason.TOKEN_REVOKED, f"jti {jti} revoked")
    if expired_on_wire or status is registrar_mod.TokenStatus.EXPIRED:
        return EnforcementResult(False, DenyReason.TOKEN_EXPIRED, f"jti {jti} expired")
    if status is not registrar_mod.TokenStatus.ACTIVE:
        return EnforcementResult(False, DenyReason.TOKEN_INVALID, f"jti {jti} not registered")

    request = AccessRequest(
        subject=raw_request.subject_attributes,
        resource_id=raw_request.resource_id,
        resource=raw_request.resource_attributes,
        action=raw_request.action,
        environment=raw_request.environment_attributes,
        token_claims=claims,
    )
    sources = AttributeSources(now=now)
    decision = pdp_evaluate(policy_set, request, sources)

    if decision.outcome is Outcome.DENY:
        return EnforcementResult(False, DenyReason.POLICY_DENY, decision=decision, claims=claims)
    if decision.outcome is Outcome.NOT_APPLICABLE:
        return EnforcementResult(
            False, DenyReason.POLICY_NOT_APPLICABLE, decision=decision, claims=claims
        )
    if decision.outcome is Outcome.INDETERMINATE:
        return EnforcementResult(
            False, DenyReason.POLICY_INDETERMINATE, decision=decision, claims=claims
        )

    # Permit: every attached obligation must pass, in declaration order.
    for obligation in decision.obligations:
        validator = validators.get(obligation.id)
        if validator is None or not validator(request, obligation, now):
            return EnforcementResult(
                False,
                DenyReason.OBLIGATION_FAILED,
                detail=obligation.id,
                decision=decision,
                claims=claims,
            )
    return EnforcementResult(True, decision=decision, claims=claims)
