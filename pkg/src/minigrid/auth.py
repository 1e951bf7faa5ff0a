"""Toy token service: principals carry a token with a simulated-time TTL."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import AuthExpired, PermissionDenied

DEFAULT_TTL = 3600.0


@dataclass(frozen=True)
class AccessToken:
    subject: str
    issued_at: float
    ttl: float = DEFAULT_TTL

    def expired(self, now: float) -> bool:
        return now > self.issued_at + self.ttl


@dataclass(frozen=True)
class Principal:
    user: str
    groups: tuple[str, ...] = ()
    roles: tuple[str, ...] = ()
    token: AccessToken | None = None

    def __post_init__(self):
        if not self.user:
            raise ValueError("principal needs a user name")
        object.__setattr__(self, "groups", tuple(self.groups))
        object.__setattr__(self, "roles", tuple(self.roles))
        if self.token is None:
            object.__setattr__(self, "token", AccessToken(self.user, 0.0, math.inf))

    @property
    def is_admin(self) -> bool:
        return "admin" in self.roles

    def has_role(self, *roles: str) -> bool:
        return any(r in self.roles for r in roles)

    def check(self, now: float):
        if self.token.expired(now):
            raise AuthExpired(f"token for {self.user} expired at t={self.token.issued_at + self.token.ttl:g}")


ADMIN = Principal("admin", ("admin",), ("admin",))


@dataclass
class TokenService:
    """Issues tokens for users known to the VO configuration."""

    users: dict = field(default_factory=dict)  # user -> (groups, roles)
    clock: object = None
    ttl: float = DEFAULT_TTL

    def now(self) -> float:
        return self.clock() if self.clock is not None else 0.0

    def authenticate(self, user: str, ttl: float | None = None) -> Principal:
        if user not in self.users:
            raise PermissionDenied(f"unknown user {user!r}")
        groups, roles = self.users[user]
        token = AccessToken(user, self.now(), self.ttl if ttl is None else ttl)
        return Principal(user, tuple(groups), tuple(roles), token)

    def renew(self, principal: Principal) -> Principal:
        return self.authenticate(principal.user)
