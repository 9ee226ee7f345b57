from sevtrace.cli import main

raise SystemExit(main())
