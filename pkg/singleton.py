from functools import wraps

def Singleton(_cls: type):
    """
    Class decorator: every construction returns the same instance, and __init__
    only runs until it first succeeds. A constructor that raises (for example
    Settings on a bad environment value) leaves nothing cached behind.

    `reset()` forgets the instance so the next call rebuilds it from the
    current environment.

    Raises:
        TypeError: if applied to something that is not a class.
        ValueError: if the class is already a singleton.
    """
    if not isinstance(_cls, type):
        raise TypeError("Singleton decorator can only be applied to classes")
    if hasattr(_cls, "_is_singleton"):
        raise ValueError("Class already has a _is_singleton attribute")
    state = {"instance": None, "ready": False}

    class SingletonClass(_cls):
        _is_singleton = True

        def __new__(cls, *args, **kwargs):
            if state["instance"] is None:
                state["instance"] = super(SingletonClass, cls).__new__(cls)
            return state["instance"]

        @wraps(_cls.__init__)
        def __init__(self, *args, **kwargs):
            if state["ready"]:
                return
            try:
                super().__init__(*args, **kwargs)
            except Exception:
                state["instance"] = None
                raise
            state["ready"] = True

        @classmethod
        def reset(cls):
            state["instance"], state["ready"] = None, False

    SingletonClass.__name__ = _cls.__name__
    SingletonClass.__qualname__ = _cls.__qualname__
    SingletonClass.__doc__ = _cls.__doc__
    return SingletonClass
