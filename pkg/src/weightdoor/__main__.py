from weightdoor.cli import main

raise SystemExit(main())
