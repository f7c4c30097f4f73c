from enum import Enum
from typing import Any, Callable, Dict, List, Union


class StageEvent(str, Enum):
    STARTED = "stage_started"
    COMPLETED = "stage_completed"
    CACHED = "stage_cached"
    FAILED = "stage_failed"


class EventEmitter:
    def __init__(self):
        self._listeners: Dict[str, List[Callable[[Any], None]]] = {}

    def on(self, event: Union[str, StageEvent], listener: Callable[[Any], None]):
        self._listeners.setdefault(_key(event), []).append(listener)

    def off(self, event: Union[str, StageEvent], listener: Callable[[Any], None]):
        listeners = self._listeners.get(_key(event), [])
        if listener in listeners:
            listeners.remove(listener)

    def emit(self, event: Union[str, StageEvent], payload: Any = None):
        for listener in list(self._listeners.get(_key(event), [])):
            listener(payload)


def _key(event: Union[str, StageEvent]) -> str:
    return event.value if isinstance(event, StageEvent) else event
