"""Condor-style submit description files with the cloud VM attributes.

Example::

    Universe   = vanilla
    Executable = script.sh
    +VMType    = "vm-name"
    +VMLoc     = "http://repository.tld/your.vm.img.gz"
    Queue

Plus-prefixed VM attributes carry double-quoted values; the quotes are
stripped on parse and put back by :func:`format_submit`.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Dict, List

from .model import Arch, Job, Network

logger = logging.getLogger(__name__)

STANDARD_KEYS = (
    "Universe", "Executable", "Arguments", "Log", "Output", "Error",
    "should_transfer_files", "when_to_transfer_output",
)
VM_KEYS = (
    "VMType", "VMLoc", "VMAMI", "VMCPUArch", "VMCPUCores", "VMStorage",
    "VMMem", "VMNetwork",
)
_STANDARD_CANON = {k.lower(): k for k in STANDARD_KEYS}
_VM_CANON = {k.lower(): k for k in VM_KEYS}

_KEY_RE = re.compile(r"^\+?[A-Za-z_][A-Za-z0-9_.]*$")
_QUEUE_RE = re.compile(r"^queue(?:\s+(\S+))?$", re.IGNORECASE)
_UINT_RE = re.compile(r"^[0-9]+$")
# a caption line such as "Regular Condor Attributes", allowed only first
_HEADING_RE = re.compile(r"^[A-Za-z]+( +[A-Za-z]+)+$")


class SubmitError(ValueError):
    """Base class for submit file problems."""


class SubmitSyntaxError(SubmitError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class DuplicateKey(SubmitError):
    def __init__(self, key: str, line: int = 0):
        super().__init__(f"duplicate attribute {key} (line {line})")
        self.key = key
        self.line = line


class MissingAttribute(SubmitError):
    def __init__(self, name: str):
        super().__init__(f"missing attribute {name}")
        self.name = name


class BadNumber(SubmitError):
    def __init__(self, key: str, value: str):
        super().__init__(f"{key}: {value!r} is not a non-negative integer")
        self.key = key
        self.value = value


@dataclass
class SubmitDescriptor:
    standard_attrs: Dict[str, str] = field(default_factory=dict)
    vm_attrs: Dict[str, str] = field(default_factory=dict)
    queue_count: int = 1


def _canonical_standard(key: str, attrs: Dict[str, str]) -> str:
    low = key.lower()
    if low in _STANDARD_CANON:
        return _STANDARD_CANON[low]
    for existing in attrs:
        if existing.lower() == low:
            return existing
    return key


def parse_submit(text: str) -> SubmitDescriptor:
    """Parse submit file text into a :class:`SubmitDescriptor`.

    Raises :class:`SubmitSyntaxError` with a 1-based line number, or
    :class:`DuplicateKey` when a VM attribute is given twice.
    """
    desc = SubmitDescriptor()
    vm_lines: Dict[str, int] = {}
    queue_line = 0
    seen_statement = False
    lines = text.splitlines()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if queue_line:
            raise SubmitSyntaxError(lineno, "statements after Queue")
        first = not seen_statement
        seen_statement = True
        if "=" not in line:
            m = _QUEUE_RE.match(line)
            if not m and first and _HEADING_RE.match(line):
                logger.info("line %d: ignoring heading %r", lineno, line)
                continue
            if not m:
                raise SubmitSyntaxError(lineno, "expected 'key = value' or Queue")
            count = m.group(1)
            if count is None:
                desc.queue_count = 1
            elif _UINT_RE.match(count) and int(count) > 0:
                desc.queue_count = int(count)
            else:
                raise SubmitSyntaxError(lineno, f"bad Queue count {count!r}")
            queue_line = lineno
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not _KEY_RE.match(key):
            raise SubmitSyntaxError(lineno, f"bad attribute name {key!r}")
        if key.startswith("+") and key[1:].lower() in _VM_CANON:
            canon = _VM_CANON[key[1:].lower()]
            if canon in vm_lines:
                raise DuplicateKey(canon, lineno)
            if len(value) >= 2 and value[0] == '"' and value[-1] == '"':
                value = value[1:-1]
            else:
                logger.warning("line %d: value of +%s is not quoted", lineno, canon)
            vm_lines[canon] = lineno
            desc.vm_attrs[canon] = value
        else:
            canon = _canonical_standard(key, desc.standard_attrs)
            desc.standard_attrs[canon] = value
    if not queue_line:
        raise SubmitSyntaxError(len(lines) + 1, "missing Queue statement")
    return desc


def format_submit(desc: SubmitDescriptor) -> str:
    """Render a descriptor so that ``parse_submit`` gives it back."""
    out = [f"{k} = {v}" for k, v in desc.standard_attrs.items()]
    out += [f'+{k} = "{v}"' for k, v in desc.vm_attrs.items()]
    out.append("Queue" if desc.queue_count == 1 else f"Queue {desc.queue_count}")
    return "\n".join(out) + "\n"


def _lookup(attrs: Dict[str, str], key: str):
    for k, v in attrs.items():
        if k.lower() == key.lower():
            return v
    return None


def _number(key: str, value, default: int) -> int:
    if value is None or value == "":
        return default
    value = value.strip()
    if not _UINT_RE.match(value):
        raise BadNumber(key, value)
    return int(value)


def descriptor_to_jobs(d: SubmitDescriptor, user: str, id_seed: int) -> List[Job]:
    """Expand a descriptor into ``d.queue_count`` jobs.

    Job ids are ``"<id_seed>.<n>"`` like Condor's cluster.proc numbering.
    Missing VMCPUArch means x86, missing VMCPUCores means one core and a
    missing VMStorage means no scratch requirement.
    """
    vm = d.vm_attrs
    vmtype = vm.get("VMType", "")
    if not vmtype:
        raise MissingAttribute("VMType")
    if not (vm.get("VMLoc") or vm.get("VMAMI")):
        raise MissingAttribute("image")
    try:
        arch = Arch(vm.get("VMCPUArch") or "x86")
    except ValueError:
        raise SubmitError(f"VMCPUArch: unknown architecture {vm['VMCPUArch']!r}") from None
    try:
        network = Network((vm.get("VMNetwork") or "private").lower())
    except ValueError:
        raise SubmitError(f"VMNetwork: unknown network {vm['VMNetwork']!r}") from None
    mem = _number("VMMem", vm.get("VMMem"), 0)
    storage = _number("VMStorage", vm.get("VMStorage"), 0)
    cores = _number("VMCPUCores", vm.get("VMCPUCores"), 1)
    if cores < 1:
        raise BadNumber("VMCPUCores", vm["VMCPUCores"])
    prio_raw = _lookup(d.standard_attrs, "priority")
    try:
        priority = int(prio_raw) if prio_raw not in (None, "") else 1
    except ValueError:
        raise BadNumber("priority", prio_raw) from None

    image_name = _lookup(d.standard_attrs, "+VMName")
    image_name = image_name.strip('"') if image_name else vmtype

    return [
        Job(
            global_job_id=f"{id_seed}.{n}",
            user=user,
            vmtype=vmtype,
            vm_name=image_name,
            vm_loc=vm.get("VMLoc", ""),
            vm_ami=vm.get("VMAMI", ""),
            vm_network=network,
            vm_cpu_arch=arch,
            vm_mem=mem,
            vm_cpu_cores=cores,
            vm_storage=storage,
            priority=priority,
        )
        for n in range(d.queue_count)
    ]
