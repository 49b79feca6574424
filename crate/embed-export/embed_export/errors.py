class ExportError(Exception):
    pass


class UnreadableImage(ExportError):
    def __init__(self, path, reason):
        super().__init__(f"unreadable image {path}: {reason}")
        self.path = path


class ModelUnavailable(ExportError):
    def __init__(self, model_id, reason):
        super().__init__(f"model {model_id!r} unavailable: {reason}")
        self.model_id = model_id


class EmptyCategoryList(ExportError):
    def __init__(self, path=None):
        super().__init__(f"no categories in {path}" if path else "no categories given")
        self.path = path
